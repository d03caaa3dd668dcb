//! Initial 3D pseudo-labels from back-projected seeds.
//!
//! Foreground comes from region growing out of the seeds, background from
//! intensity thresholds anchored at the seed mean `v_ave`:
//!
//! * `T1`: every voxel in a column whose pixel is unannotated,
//! * `T2`: voxels darker than `beta * v_ave` in annotated columns,
//! * `T3`: voxels in unannotated columns with `gamma * v_ave < X < eta * v_ave`,
//!   i.e. vessels that were hidden behind something brighter.
//!
//! The background set is `(T1 ∪ T2) \ T3`.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{Mask2D, Mip2D};
use crate::volume::{BinaryVolume, Connectivity, Dims, Grid3, Label, LabelVolume, ScalarVolume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowConfig {
    /// Maximum admitted `|X(q) - v_ave|`, exclusive.
    pub alpha: f64,
    pub connectivity: Connectivity,
}

impl Default for GrowConfig {
    fn default() -> Self {
        GrowConfig {
            alpha: 0.1,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl GrowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_finite() && self.alpha > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)))
        }
    }
}

/// Multipliers of `v_ave` for the three background thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundConfig {
    pub beta_coef: f64,
    pub gamma_coef: f64,
    pub eta_coef: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            beta_coef: 0.2,
            gamma_coef: 1.2,
            eta_coef: 1.6,
        }
    }
}

impl BackgroundConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = 0.0 < self.beta_coef && self.beta_coef < self.gamma_coef && self.gamma_coef < self.eta_coef;
        if ordered && self.eta_coef.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "need 0 < beta < gamma < eta, got {} / {} / {}",
                self.beta_coef, self.gamma_coef, self.eta_coef
            )))
        }
    }

    pub fn thresholds(&self, v_ave: f64) -> Thresholds {
        Thresholds {
            beta: self.beta_coef * v_ave,
            gamma: self.gamma_coef * v_ave,
            eta: self.eta_coef * v_ave,
        }
    }
}

/// Absolute intensity thresholds for one volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

fn check_seeds(dims: Dims, seeds: &[[usize; 3]]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::EmptySet("seed set"));
    }
    match seeds.iter().find(|s| !dims.contains(**s)) {
        Some(s) => Err(Error::InvalidGrid(format!("seed {s:?} lies outside {dims}"))),
        None => Ok(()),
    }
}

/// Mean intensity of the seed voxels.
pub fn foreground_mean(v: &ScalarVolume, seeds: &[[usize; 3]]) -> Result<f64> {
    check_seeds(v.dims(), seeds)?;
    let sum: f64 = seeds.iter().map(|&s| *v.at(s) as f64).sum();
    Ok(sum / seeds.len() as f64)
}

/// Breadth-first growth from the seeds, admitting a neighbour `q` when
/// `|X(q) - v_ave| < alpha`. `v_ave` is the seed mean and stays fixed, so
/// the result is the set of admitted voxels connected to a seed, plus the
/// seeds themselves.
pub fn region_grow(v: &ScalarVolume, seeds: &[[usize; 3]], cfg: &GrowConfig) -> Result<BinaryVolume> {
    cfg.validate()?;
    let v_ave = foreground_mean(v, seeds)?;
    let dims = v.dims();
    let data = v.data();
    let mut grown = Grid3::new(dims, v.spacing(), vec![false; dims.len()])?;
    let mut visited = vec![false; dims.len()];
    let mut queue = VecDeque::new();
    for &s in seeds {
        let i = dims.index_of(s);
        if !visited[i] {
            visited[i] = true;
            grown.data_mut()[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for n in dims.neighbors(i, cfg.connectivity) {
            if visited[n] {
                continue;
            }
            if (data[n] as f64 - v_ave).abs() < cfg.alpha {
                visited[n] = true;
                grown.data_mut()[n] = true;
                queue.push_back(n);
            }
        }
    }
    Ok(grown)
}

/// Background voxels `(T1 ∪ T2) \ T3`.
pub fn build_background(
    v: &ScalarVolume,
    mask: &Mask2D,
    mip: &Mip2D,
    v_ave: f64,
    cfg: &BackgroundConfig,
) -> Result<BinaryVolume> {
    cfg.validate()?;
    mip.check_mask(mask)?;
    if mip.source_dims != v.dims() {
        return Err(Error::dims(mip.source_dims, v.dims()));
    }
    if !(v_ave.is_finite() && v_ave > 0.0) {
        return Err(Error::InvalidConfig(format!("v_ave must be positive, got {v_ave}")));
    }
    let th = cfg.thresholds(v_ave);
    let dims = v.dims();
    let axis = mip.axis;
    let data = v.data();
    let bits = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let (a, b, _) = axis.pixel(dims.coord(i));
            let annotated = mask.get(a, b);
            let x = data[i] as f64;
            let t1 = !annotated;
            let t2 = annotated && x < th.beta;
            let t3 = !annotated && th.gamma < x && x < th.eta;
            (t1 || t2) && !t3
        })
        .collect();
    Grid3::new(dims, v.spacing(), bits)
}

/// Ternary labels plus the voxels claimed by both sets.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub labels: LabelVolume,
    /// Linear indices in both the foreground and background sets, ascending.
    /// They are left unlabeled in `labels`.
    pub conflicts: Vec<usize>,
}

pub fn assemble_pseudolabel(s1: &BinaryVolume, s0: &BinaryVolume) -> Result<PseudoLabel> {
    s1.ensure_same_dims(s0)?;
    let mut conflicts = Vec::new();
    let labels = s1
        .data()
        .iter()
        .zip(s0.data())
        .enumerate()
        .map(|(i, (&fg, &bg))| match (fg, bg) {
            (true, false) => Label::Foreground,
            (false, true) => Label::Background,
            (true, true) => {
                conflicts.push(i);
                Label::Unlabeled
            }
            (false, false) => Label::Unlabeled,
        })
        .collect();
    Ok(PseudoLabel {
        labels: Grid3::new(s1.dims(), s1.spacing(), labels)?,
        conflicts,
    })
}
