//! Synthetic vessel phantoms with exact ground truth, plus synthetic
//! "network outputs" for exercising refinement without a trained model.
//!
//! Randomness is counter-based: every voxel draws from its own ChaCha
//! stream keyed by the voxel index, so output does not depend on how the
//! work is split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, Dims, Grid3, ProbabilityVolume, ScalarVolume, Spacing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Radius {
    Constant(f64),
    /// One radius per control point, interpolated linearly along segments.
    Profile(Vec<f64>),
}

/// A polyline tube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tube {
    /// Control points in voxel coordinates.
    pub points: Vec<[f64; 3]>,
    pub radius: Radius,
}

impl Tube {
    fn radius_at(&self, point: usize) -> f64 {
        match &self.radius {
            Radius::Constant(r) => *r,
            Radius::Profile(r) => r[point],
        }
    }

    /// Signed clearance: negative or zero inside the tube.
    fn clearance(&self, p: [f64; 3]) -> f64 {
        if self.points.len() == 1 {
            return dist(p, self.points[0]) - self.radius_at(0);
        }
        self.points
            .windows(2)
            .enumerate()
            .map(|(s, w)| {
                let (a, b) = (w[0], w[1]);
                let ab = sub(b, a);
                let len2 = dot(ab, ab);
                let t = if len2 > 0.0 {
                    (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let closest = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
                let r = self.radius_at(s) + t * (self.radius_at(s + 1) - self.radius_at(s));
                dist(p, closest) - r
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(d, d).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    #[serde(default)]
    pub spacing: Spacing,
    pub tubes: Vec<Tube>,
    /// Vessel intensities are drawn from this range.
    pub vessel_range: [f64; 2],
    /// Background intensities are drawn from this range; its top must lie
    /// strictly below the bottom of `vessel_range`.
    pub background_range: [f64; 2],
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dims.is_empty() {
            return bad(format!("dims {} contain a zero extent", self.dims));
        }
        self.spacing.validate()?;
        let [v_lo, v_hi] = self.vessel_range;
        let [b_lo, b_hi] = self.background_range;
        if ![v_lo, v_hi, b_lo, b_hi, self.noise_std].iter().all(|v| v.is_finite()) {
            return bad("intensity ranges and noise must be finite".into());
        }
        if v_lo > v_hi || b_lo > b_hi {
            return bad("intensity ranges must be ordered [low, high]".into());
        }
        if b_hi >= v_lo {
            return bad(format!("background top {b_hi} must lie below vessel bottom {v_lo}"));
        }
        if self.noise_std < 0.0 {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.tubes.is_empty() {
            return bad("phantom needs at least one tube".into());
        }
        let ext = self.dims.as_array();
        for tube in &self.tubes {
            if tube.points.is_empty() {
                return bad("tube without control points".into());
            }
            let radii_ok = match &tube.radius {
                Radius::Constant(r) => *r > 0.0 && r.is_finite(),
                Radius::Profile(r) => r.len() == tube.points.len() && r.iter().all(|r| *r > 0.0 && r.is_finite()),
            };
            if !radii_ok {
                return bad("tube radii must be positive, one per control point for profiles".into());
            }
            for &p in &tube.points {
                let inside = (0..3).all(|a| p[a].is_finite() && p[a] >= 0.0 && p[a] <= (ext[a] - 1) as f64);
                if !inside {
                    return Err(Error::TubeOutOfBounds {
                        point: p,
                        dims: self.dims,
                    });
                }
            }
        }
        Ok(())
    }

    /// A single straight tube along z through the center of an `n`-cube,
    /// spanning `margin..n-1-margin`.
    pub fn straight_tube(n: usize, radius: f64, margin: usize) -> Self {
        let c = (n as f64 - 1.0) / 2.0;
        PhantomSpec {
            dims: Dims::cube(n),
            spacing: Spacing::default(),
            tubes: vec![Tube {
                points: vec![[c, c, margin as f64], [c, c, (n - 1 - margin) as f64]],
                radius: Radius::Constant(radius),
            }],
            vessel_range: [0.7, 1.0],
            background_range: [0.0, 0.3],
            noise_std: 0.0,
            seed: 0,
        }
    }

    /// A trunk that splits into two tapering branches, in an `n`-cube.
    pub fn y_branch(n: usize, seed: u64) -> Self {
        let s = (n - 1) as f64;
        let fork = [0.5 * s, 0.5 * s, 0.5 * s];
        PhantomSpec {
            dims: Dims::cube(n),
            spacing: Spacing::default(),
            tubes: vec![
                Tube {
                    points: vec![[0.5 * s, 0.45 * s, 0.1 * s], fork],
                    radius: Radius::Constant(0.05 * s),
                },
                Tube {
                    points: vec![fork, [0.2 * s, 0.35 * s, 0.85 * s]],
                    radius: Radius::Profile(vec![0.05 * s, 0.025 * s]),
                },
                Tube {
                    points: vec![fork, [0.8 * s, 0.6 * s, 0.9 * s]],
                    radius: Radius::Profile(vec![0.05 * s, 0.03 * s]),
                },
            ],
            vessel_range: [0.7, 1.0],
            background_range: [0.0, 0.3],
            noise_std: 0.05,
            seed,
        }
    }

    /// A random tree of 1 to 3 tubes with 2 to 4 control points each.
    pub fn random_tree(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (n - 1) as f64;
        let point = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|_| rng.random_range(0.15 * s..=0.85 * s));
        let root = point(&mut rng);
        let tubes = (0..rng.random_range(1..=3))
            .map(|_| {
                let mut points = vec![root];
                for _ in 0..rng.random_range(1..=3) {
                    points.push(point(&mut rng));
                }
                Tube {
                    points,
                    radius: Radius::Constant(rng.random_range(0.8..=2.2)),
                }
            })
            .collect();
        PhantomSpec {
            dims: Dims::cube(n),
            spacing: Spacing::default(),
            tubes,
            vessel_range: [0.7, 1.0],
            background_range: [0.0, 0.3],
            noise_std: 0.05,
            seed,
        }
    }
}

/// Derives an independent 64-bit seed for `tag` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn voxel_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Ground-truth mask: every voxel center within radius of some tube.
pub fn ground_truth(spec: &PhantomSpec) -> Result<BinaryVolume> {
    spec.validate()?;
    let dims = spec.dims;
    let bits = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let c = dims.coord(i).map(|v| v as f64);
            spec.tubes.iter().any(|t| t.clearance(c) <= 0.0)
        })
        .collect();
    Grid3::new(dims, spec.spacing, bits)
}

/// Renders the phantom volume and its ground truth. Each voxel's intensity
/// is uniform in its class range plus Gaussian noise, clamped back into the
/// class range so the brightness separation always holds.
pub fn generate(spec: &PhantomSpec) -> Result<(ScalarVolume, BinaryVolume)> {
    let gt = ground_truth(spec)?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let seed = derive_seed(spec.seed, 0);
    let data = gt
        .data()
        .par_iter()
        .enumerate()
        .map(|(i, &vessel)| {
            let [lo, hi] = if vessel { spec.vessel_range } else { spec.background_range };
            let mut rng = voxel_rng(seed, i);
            let base = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let v = base + noise.sample(&mut rng);
            v.clamp(lo, hi) as f32
        })
        .collect();
    Ok((Grid3::new(spec.dims, spec.spacing, data)?, gt))
}

/// Settings for synthetic predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Foreground probability on ground-truth voxels; `1 - quality` elsewhere.
    pub quality: f64,
    pub passes: usize,
    /// Mean of the per-pass Gaussian perturbation.
    pub pass_mean: f64,
    /// Std of the per-pass Gaussian perturbation.
    pub pass_std: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            quality: 0.9,
            passes: 6,
            pass_mean: 0.0,
            pass_std: 0.1,
            seed: 0,
        }
    }
}

/// A clean prediction agreeing with `gt` at confidence `quality`, and
/// `passes` perturbed copies (clamped to `[0, 1]`).
pub fn oracle_probabilities(gt: &BinaryVolume, cfg: &OracleConfig) -> Result<(ProbabilityVolume, Vec<ProbabilityVolume>)> {
    if !(cfg.quality > 0.5 && cfg.quality <= 1.0) {
        return Err(Error::InvalidConfig(format!("quality must lie in (0.5, 1], got {}", cfg.quality)));
    }
    let noise = Normal::new(cfg.pass_mean, cfg.pass_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let q = cfg.quality;
    let clean_data: Vec<f32> = gt.data().iter().map(|&g| if g { q } else { 1.0 - q } as f32).collect();
    let clean = ProbabilityVolume::new(Grid3::new(gt.dims(), gt.spacing(), clean_data.clone())?)?;
    let passes = (0..cfg.passes)
        .map(|k| {
            let seed = derive_seed(cfg.seed, k as u64 + 1);
            let data = clean_data
                .par_iter()
                .enumerate()
                .map(|(i, &p)| {
                    let mut rng = voxel_rng(seed, i);
                    (p as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
                })
                .collect();
            ProbabilityVolume::new(Grid3::new(gt.dims(), gt.spacing(), data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clean, passes))
}
