//! Raster files: 8-bit PNG for color, masks and normal visualizations, and a
//! raw little-endian float format for depth.
//!
//! Depth raster layout: `b"DNFD"`, `u32` width, `u32` height, `u32` format
//! version (1), then `width * height` `f32` values row-major.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::RenderError;

pub const DEPTH_MAGIC: &[u8; 4] = b"DNFD";
const DEPTH_VERSION: u32 = 1;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn codec(e: image::ImageError) -> RenderError {
    RenderError::Codec(e.to_string())
}

fn ensure_parent(path: &Path) -> Result<(), RenderError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Interleaved RGB in `[0, 1]` to an RGB image.
pub fn rgb_image(width: usize, height: usize, rgb: &[f64]) -> RgbImage {
    assert_eq!(rgb.len(), width * height * 3);
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = (y as usize * width + x as usize) * 3;
        Rgb([to_u8(rgb[i]), to_u8(rgb[i + 1]), to_u8(rgb[i + 2])])
    })
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<(), RenderError> {
    ensure_parent(path)?;
    rgb_image(width, height, rgb).save(path).map_err(codec)
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), RenderError> {
    assert_eq!(values.len(), width * height);
    ensure_parent(path)?;
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([to_u8(values[y as usize * width + x as usize])])
    })
    .save(path)
    .map_err(codec)
}

/// Maps unit normals from `[-1, 1]` to `[0, 1]` per channel; zero normals stay black.
pub fn write_normal_png(path: &Path, width: usize, height: usize, normals: &[f64]) -> Result<(), RenderError> {
    let vis: Vec<f64> = normals
        .chunks(3)
        .flat_map(|n| {
            if n.iter().all(|v| *v == 0.0) {
                [0.0; 3]
            } else {
                [0.5 * (n[0] + 1.0), 0.5 * (n[1] + 1.0), 0.5 * (n[2] + 1.0)]
            }
        })
        .collect();
    write_rgb_png(path, width, height, &vis)
}

/// Reads a PNG as interleaved RGB in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f64>), RenderError> {
    let img = image::open(path).map_err(codec)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    Ok((w as usize, h as usize, data))
}

/// Reads a PNG as single-channel values in `[0, 1]`.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<f64>), RenderError> {
    let img = image::open(path).map_err(codec)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    Ok((w as usize, h as usize, data))
}

pub fn encode_depth(width: usize, height: usize, depth: &[f64]) -> Vec<u8> {
    assert_eq!(depth.len(), width * height);
    let mut out = Vec::with_capacity(16 + depth.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&DEPTH_VERSION.to_le_bytes());
    for d in depth {
        out.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), RenderError> {
    if bytes.len() < 16 {
        return Err(RenderError::BadRaster("truncated depth header".into()));
    }
    if &bytes[..4] != DEPTH_MAGIC {
        return Err(RenderError::BadRaster("bad depth magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let (w, h, version) = (word(4) as usize, word(8) as usize, word(12));
    if version != DEPTH_VERSION {
        return Err(RenderError::BadRaster(format!("unsupported depth version {version}")));
    }
    let body = &bytes[16..];
    if body.len() != w * h * 4 {
        return Err(RenderError::BadRaster(format!(
            "depth body has {} bytes, expected {}",
            body.len(),
            w * h * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((w, h, data))
}

pub fn write_depth(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<(), RenderError> {
    ensure_parent(path)?;
    fs::write(path, encode_depth(width, height, depth))?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f64>), RenderError> {
    decode_depth(&fs::read(path)?)
}

/// Tiles equally sized RGB views into a grid with `columns` columns.
pub fn contact_sheet(width: usize, height: usize, views: &[Vec<f64>], columns: usize) -> RgbImage {
    let columns = columns.max(1);
    let rows = views.len().div_ceil(columns).max(1);
    let mut sheet = RgbImage::new((width * columns) as u32, (height * rows) as u32);
    for (k, view) in views.iter().enumerate() {
        let tile = rgb_image(width, height, view);
        let (ox, oy) = ((k % columns) * width, (k / columns) * height);
        for (x, y, px) in tile.enumerate_pixels() {
            sheet.put_pixel(ox as u32 + x, oy as u32 + y, *px);
        }
    }
    sheet
}

pub fn write_contact_sheet(
    path: &Path,
    width: usize,
    height: usize,
    views: &[Vec<f64>],
    columns: usize,
) -> Result<(), RenderError> {
    ensure_parent(path)?;
    contact_sheet(width, height, views, columns).save(path).map_err(codec)
}
