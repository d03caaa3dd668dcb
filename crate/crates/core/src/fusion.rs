//! 3D-to-2D feature retrieval along the projection index map, and the
//! training losses in probability space.
//!
//! Feature grids put the channel axis slowest and otherwise follow the
//! volume layout (`x` fastest, depth slowest), so a 3D grid value lives at
//! `((c * depth + z) * height + y) * width + x`.

use crate::error::{Error, Result};
use crate::projection::{Mask2D, Mip2D};
use crate::volume::{Dims, ProbabilityVolume};

/// Probability clamp used inside the logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Additive smoothing of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid3D {
    pub channels: usize,
    /// Spatial extent; `nz` is the depth axis that retrieval collapses.
    pub dims: Dims,
    pub values: Vec<f32>,
}

impl FeatureGrid3D {
    pub fn new(channels: usize, dims: Dims, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.is_empty() {
            return Err(Error::InvalidGrid(format!("feature grid {channels}x{dims} is empty")));
        }
        if values.len() != channels * dims.len() {
            return Err(Error::InvalidGrid(format!(
                "feature grid {channels}x{dims} needs {} values, got {}",
                channels * dims.len(),
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(FeatureGrid3D { channels, dims, values })
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.values[c * self.dims.len() + self.dims.index(x, y, z)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid2D {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl FeatureGrid2D {
    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

/// The index map at one pyramid level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexLevel {
    pub level: u32,
    pub width: usize,
    pub height: usize,
    /// Depth extent at this level; every index is below it.
    pub depth: usize,
    pub index: Vec<u32>,
}

impl IndexLevel {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> usize {
        self.index[y * self.width + x] as usize
    }
}

/// Index map for pyramid level `level` (0..=3): nearest-neighbour spatial
/// subsampling by `2^level`, then `floor(index / 2^level)`, clamped to the
/// reduced depth.
pub fn downscale_index(mip: &Mip2D, level: u32) -> Result<IndexLevel> {
    if level > 3 {
        return Err(Error::LevelOutOfRange(level));
    }
    let f = 1usize << level;
    if !mip.width.is_multiple_of(f) || !mip.height.is_multiple_of(f) {
        return Err(Error::InvalidGrid(format!(
            "{}x{} index map is not divisible by {f}; pad the volume first",
            mip.width, mip.height
        )));
    }
    let depth = mip.depth() >> level;
    if depth == 0 {
        return Err(Error::InvalidGrid(format!(
            "depth {} is too small for level {level}",
            mip.depth()
        )));
    }
    let (width, height) = (mip.width / f, mip.height / f);
    let index = (0..width * height)
        .map(|p| {
            let (x, y) = (p % width, p / width);
            let k = mip.index[(y * f) * mip.width + x * f] >> level;
            k.min(depth as u32 - 1)
        })
        .collect();
    Ok(IndexLevel {
        level,
        width,
        height,
        depth,
        index,
    })
}

/// Gathers `f3d(c, x, y, idx(x, y))` for every channel and pixel.
pub fn feature_retrieve(f3d: &FeatureGrid3D, idx: &IndexLevel) -> Result<FeatureGrid2D> {
    let d = f3d.dims;
    if (d.nx, d.ny) != (idx.width, idx.height) {
        return Err(Error::dims(
            format!("{}x{}", d.nx, d.ny),
            format!("{}x{}", idx.width, idx.height),
        ));
    }
    if let Some(&bad) = idx.index.iter().find(|&&k| k as usize >= d.nz) {
        return Err(Error::IndexOutOfRange {
            value: bad as usize,
            limit: d.nz,
        });
    }
    let plane = d.nx * d.ny;
    let mut values = Vec::with_capacity(f3d.channels * plane);
    for c in 0..f3d.channels {
        let base = c * d.len();
        values.extend(
            idx.index
                .iter()
                .enumerate()
                .map(|(p, &k)| f3d.values[base + k as usize * plane + p]),
        );
    }
    Ok(FeatureGrid2D {
        channels: f3d.channels,
        width: d.nx,
        height: d.ny,
        values,
    })
}

/// Level-0 retrieval of a probability volume along any projection axis:
/// the foreground probability at the voxel that produced each MIP pixel.
pub fn retrieve_probability(p: &ProbabilityVolume, mip: &Mip2D) -> Result<Vec<f64>> {
    if p.dims() != mip.source_dims {
        return Err(Error::dims(mip.source_dims, p.dims()));
    }
    Ok((0..mip.width * mip.height)
        .map(|px| p.p_fg(mip.source_index(px % mip.width, px / mip.width)))
        .collect())
}

/// A loss value with its gradient with respect to each input probability.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Weighted cross-entropy over the labeled voxel sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss3d {
    pub value: f64,
    /// Foreground, seed and background contributions.
    pub terms: [f64; 3],
    /// Which of the three sets were empty and so contributed zero.
    pub empty: [bool; 3],
    /// Gradient with respect to every foreground probability.
    pub grad: Vec<f64>,
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, false)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, false)
    } else {
        (p, true)
    }
}

/// `-mean_{S_f} log p - mean_{S_p} log p - mean_{S_b} log(1 - p)` over
/// foreground probabilities `p_fg`, with `p` clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`. An empty set contributes zero.
pub fn loss_3d(p_fg: &[f64], fg: &[usize], seeds: &[usize], bg: &[usize]) -> Result<Loss3d> {
    let n = p_fg.len();
    if let Some(&bad) = fg.iter().chain(seeds).chain(bg).find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { value: bad, limit: n });
    }
    let mut grad = vec![0.0; n];
    let mut terms = [0.0; 3];
    let mut empty = [false; 3];
    for (t, (set, positive)) in [(fg, true), (seeds, true), (bg, false)].into_iter().enumerate() {
        if set.is_empty() {
            empty[t] = true;
            continue;
        }
        let w = 1.0 / set.len() as f64;
        let mut sum = 0.0;
        for &i in set {
            let q = if positive { p_fg[i] } else { 1.0 - p_fg[i] };
            let (qc, inside) = clamp_prob(q);
            sum -= qc.ln();
            if inside {
                // d(-log q)/dp = -1/q for q = p and +1/q for q = 1 - p.
                grad[i] += if positive { -w / qc } else { w / qc };
            }
        }
        terms[t] = sum * w;
    }
    Ok(Loss3d {
        value: terms.iter().sum(),
        terms,
        empty,
        grad,
    })
}

/// Soft Dice loss `1 - (2 Σ p y + s) / (Σ p + Σ y + s)`.
pub fn dice_loss(p: &[f64], y: &[bool]) -> Result<LossTerm> {
    if p.len() != y.len() {
        return Err(Error::dims(y.len(), p.len()));
    }
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        sum_p += pi;
        if yi {
            inter += pi;
            sum_y += 1.0;
        }
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_y + DICE_SMOOTH;
    let grad = y
        .iter()
        .map(|&yi| -((if yi { 2.0 } else { 0.0 }) * den - num) / (den * den))
        .collect();
    Ok(LossTerm {
        value: 1.0 - num / den,
        grad,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loss2d {
    pub value: f64,
    /// Dice of the retrieved 3D prediction against the annotation.
    pub from_3d: LossTerm,
    /// Dice of the 2D prediction against the annotation, when supplied.
    pub from_2d: Option<LossTerm>,
}

/// Sum of the Dice losses of the retrieved 3D prediction and of the 2D
/// prediction against the annotation. Without a 2D prediction only the
/// first term is computed.
pub fn loss_2d(p_from_3d: &[f64], p_2d: Option<&[f64]>, mask: &Mask2D) -> Result<Loss2d> {
    let from_3d = dice_loss(p_from_3d, &mask.bits)?;
    let from_2d = p_2d.map(|p| dice_loss(p, &mask.bits)).transpose()?;
    Ok(Loss2d {
        value: from_3d.value + from_2d.as_ref().map_or(0.0, |t| t.value),
        from_3d,
        from_2d,
    })
}

/// `l3d + lambda * l2d`.
pub fn loss_all(l3d: f64, l2d: f64, lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(l3d + lambda * l2d)
}
