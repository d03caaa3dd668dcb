//! Maximum-intensity projection, its argmax index map, and back-projection
//! of 2D annotations into 3D seed voxels.
//!
//! A projection along `axis` produces a `width x height` image whose pixel
//! `(a, b)` is stored at `b * width + a`:
//!
//! | axis | `a` | `b` | depth |
//! |------|-----|-----|-------|
//! | `Z`  | x   | y   | z     |
//! | `Y`  | x   | z   | y     |
//! | `X`  | y   | z   | x     |

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, ScalarVolume};

/// Projection direction. `Z` is the transverse default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    #[default]
    Z,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::InvalidConfig(format!("axis must be x, y or z, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl Axis {
    /// `(width, height, depth)` of a projection of a `dims` volume.
    pub fn plane(self, dims: Dims) -> (usize, usize, usize) {
        match self {
            Axis::Z => (dims.nx, dims.ny, dims.nz),
            Axis::Y => (dims.nx, dims.nz, dims.ny),
            Axis::X => (dims.ny, dims.nz, dims.nx),
        }
    }

    /// Voxel coordinate of pixel `(a, b)` at depth `k`.
    #[inline]
    pub fn voxel(self, a: usize, b: usize, k: usize) -> [usize; 3] {
        match self {
            Axis::Z => [a, b, k],
            Axis::Y => [a, k, b],
            Axis::X => [k, a, b],
        }
    }

    /// Inverse of [`Axis::voxel`]: `(a, b, k)` for a voxel coordinate.
    #[inline]
    pub fn pixel(self, c: [usize; 3]) -> (usize, usize, usize) {
        match self {
            Axis::Z => (c[0], c[1], c[2]),
            Axis::Y => (c[0], c[2], c[1]),
            Axis::X => (c[1], c[2], c[0]),
        }
    }
}

/// A projection image with the depth at which each maximum was found.
#[derive(Clone, Debug, PartialEq)]
pub struct Mip2D {
    pub axis: Axis,
    pub source_dims: Dims,
    pub width: usize,
    pub height: usize,
    pub intensity: Vec<f32>,
    pub index: Vec<u32>,
}

impl Mip2D {
    /// Number of voxels along the projection axis.
    pub fn depth(&self) -> usize {
        self.axis.plane(self.source_dims).2
    }

    /// Linear source-volume index of the voxel that produced pixel `(a, b)`.
    pub fn source_index(&self, a: usize, b: usize) -> usize {
        let k = self.index[b * self.width + a] as usize;
        self.source_dims.index_of(self.axis.voxel(a, b, k))
    }

    pub fn check_mask(&self, mask: &Mask2D) -> Result<()> {
        if (mask.width, mask.height) == (self.width, self.height) {
            Ok(())
        } else {
            Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", mask.width, mask.height),
            ))
        }
    }
}

/// A binary 2D annotation of a projection image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask2D {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask2D {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height || bits.is_empty() {
            return Err(Error::InvalidGrid(format!(
                "mask of {width}x{height} needs {} pixels, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Mask2D { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Mask2D::new(width, height, vec![false; width * height])
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> bool {
        self.bits[b * self.width + a]
    }

    pub fn set(&mut self, a: usize, b: usize, value: bool) {
        self.bits[b * self.width + a] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel maximum and argmax along `axis`. Ties keep the smallest depth.
pub fn mip_project(v: &ScalarVolume, axis: Axis) -> Mip2D {
    let dims = v.dims();
    let (width, height, depth) = axis.plane(dims);
    let data = v.data();
    let (intensity, index): (Vec<f32>, Vec<u32>) = (0..width * height)
        .into_par_iter()
        .map(|p| {
            let (a, b) = (p % width, p / width);
            let mut best = data[dims.index_of(axis.voxel(a, b, 0))];
            let mut best_k = 0u32;
            for k in 1..depth {
                let x = data[dims.index_of(axis.voxel(a, b, k))];
                if x > best {
                    best = x;
                    best_k = k as u32;
                }
            }
            (best, best_k)
        })
        .unzip();
    Mip2D {
        axis,
        source_dims: dims,
        width,
        height,
        intensity,
        index,
    }
}

/// Lifts annotated pixels to the voxels their maxima came from.
///
/// Returns one voxel coordinate per set pixel, in pixel order.
pub fn back_project(mask: &Mask2D, mip: &Mip2D) -> Result<Vec<[usize; 3]>> {
    mip.check_mask(mask)?;
    Ok(mask
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &set)| set)
        .map(|(p, _)| {
            let (a, b) = (p % mip.width, p / mip.width);
            mip.axis.voxel(a, b, mip.index[p] as usize)
        })
        .collect())
}

/// Binary projection of a mask volume: a pixel is set when any voxel in
/// its column is set. Used to derive reference annotations from ground truth.
pub fn project_mask(gt: &crate::volume::BinaryVolume, axis: Axis) -> Mask2D {
    let dims = gt.dims();
    let (width, height, depth) = axis.plane(dims);
    let bits = (0..width * height)
        .map(|p| {
            let (a, b) = (p % width, p / width);
            (0..depth).any(|k| *gt.at(axis.voxel(a, b, k)))
        })
        .collect();
    Mask2D { width, height, bits }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png(format!("{}: {e}", path.display()))
}

fn write_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Writes the projection intensities as a 16-bit grayscale PNG, min-max
/// rescaled to `0..=65535` (a constant image is written as all zeros).
pub fn export_png(mip: &Mip2D, path: impl AsRef<Path>) -> Result<()> {
    let (lo, hi) = mip
        .intensity
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x as f64), hi.max(x as f64)));
    let range = hi - lo;
    let bytes: Vec<u8> = mip
        .intensity
        .iter()
        .flat_map(|&x| {
            let q = if range > 0.0 {
                ((x as f64 - lo) / range * 65535.0).round() as u16
            } else {
                0
            };
            q.to_be_bytes()
        })
        .collect();
    write_png(path.as_ref(), mip.width, mip.height, png::BitDepth::Sixteen, &bytes)
}

struct DecodedPng {
    width: usize,
    height: usize,
    /// Gray (or max color channel) sample per pixel, alpha dropped.
    samples: Vec<u16>,
    bit_depth: png::BitDepth,
}

fn read_png(path: &Path) -> Result<DecodedPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let (color_channels, has_alpha) = match info.color_type {
        png::ColorType::Grayscale => (1, false),
        png::ColorType::GrayscaleAlpha => (1, true),
        png::ColorType::Rgb => (3, false),
        png::ColorType::Rgba => (3, true),
        png::ColorType::Indexed => return Err(png_err(path, "palette images are not supported")),
    };
    let stride = color_channels + usize::from(has_alpha);
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let sample = |i: usize| -> u16 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]])
        } else {
            buf[i] as u16
        }
    };
    let mut samples = Vec::with_capacity(width * height);
    for row in 0..height {
        let row_start = row * info.line_size / if wide { 2 } else { 1 };
        for col in 0..width {
            let base = row_start + col * stride;
            samples.push((0..color_channels).map(|c| sample(base + c)).max().unwrap_or(0));
        }
    }
    Ok(DecodedPng {
        width,
        height,
        samples,
        bit_depth: info.bit_depth,
    })
}

/// Reads a projection PNG back as values in `[0, 1]`.
pub fn import_mip_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let png = read_png(path.as_ref())?;
    let full = if png.bit_depth == png::BitDepth::Sixteen { 65535.0 } else { 255.0 };
    let values = png.samples.iter().map(|&s| s as f64 / full).collect();
    Ok((png.width, png.height, values))
}

/// Reads an annotation PNG; any nonzero sample marks a vessel pixel.
pub fn import_mask_png(path: impl AsRef<Path>, expected: (usize, usize)) -> Result<Mask2D> {
    let png = read_png(path.as_ref())?;
    if (png.width, png.height) != expected {
        return Err(Error::dims(
            format!("{}x{}", expected.0, expected.1),
            format!("{}x{}", png.width, png.height),
        ));
    }
    Mask2D::new(png.width, png.height, png.samples.iter().map(|&s| s != 0).collect())
}

/// Writes a mask as 8-bit grayscale with 255 for vessel pixels.
pub fn export_mask_png(mask: &Mask2D, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path.as_ref(), mask.width, mask.height, png::BitDepth::Eight, &bytes)
}
