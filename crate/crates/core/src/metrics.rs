//! Overlap, topology and distance metrics for binary vessel masks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::edt::squared_distance_field;
use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, Connectivity, Label, LabelVolume, Spacing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub cldice: f64,
    /// Millimeters.
    pub ahd: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

/// Computes every metric of `pred` against `gt`; distances use the spacing
/// of `gt`.
pub fn evaluate(pred: &BinaryVolume, gt: &BinaryVolume) -> Result<MetricReport> {
    pred.ensure_same_dims(gt)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(MetricReport {
        dsc: dsc(pred, gt)?,
        cldice: cldice(pred, gt)?,
        ahd: ahd(pred, gt, gt.spacing())?,
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_,
    })
}

/// Agreement of a ternary label volume with ground truth over its labeled
/// voxels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    /// Labeled voxels per class (background, foreground).
    pub labeled: [usize; 2],
    /// Labeled voxels per class whose label matches ground truth.
    pub correct: [usize; 2],
    /// Total mislabeled voxels.
    pub errors: usize,
}

impl LabelQuality {
    /// Fraction of correct labels in class `i`; `None` when it is empty.
    pub fn accuracy(&self, i: usize) -> Option<f64> {
        (self.labeled[i] > 0).then(|| self.correct[i] as f64 / self.labeled[i] as f64)
    }
}

pub fn label_quality(labels: &LabelVolume, gt: &BinaryVolume) -> Result<LabelQuality> {
    labels.ensure_same_dims(gt)?;
    let mut q = LabelQuality::default();
    for (&l, &g) in labels.data().iter().zip(gt.data()) {
        let class = match l {
            Label::Background => 0,
            Label::Foreground => 1,
            Label::Unlabeled => continue,
        };
        q.labeled[class] += 1;
        if (class == 1) == g {
            q.correct[class] += 1;
        } else {
            q.errors += 1;
        }
    }
    Ok(q)
}

/// Dice similarity `2|A ∩ B| / (|A| + |B|)`.
pub fn dsc(a: &BinaryVolume, b: &BinaryVolume) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        return Err(Error::EmptySet("both masks"));
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Average Hausdorff distance: the mean of the two directed average
/// distances, in the units of `spacing`.
pub fn ahd(a: &BinaryVolume, b: &BinaryVolume, spacing: Spacing) -> Result<f64> {
    a.ensure_same_dims(b)?;
    spacing.validate()?;
    let directed = |from: &BinaryVolume, to: &BinaryVolume| -> Result<f64> {
        let members = from.indices();
        if members.is_empty() || to.count() == 0 {
            return Err(Error::EmptySet("mask"));
        }
        let d2 = squared_distance_field(to, spacing.0);
        let sum: f64 = members.iter().map(|&i| d2[i].sqrt()).sum();
        Ok(sum / members.len() as f64)
    };
    Ok(0.5 * (directed(a, b)? + directed(b, a)?))
}

/// Topology-aware overlap: harmonic mean of the fraction of the predicted
/// skeleton inside the reference and of the reference skeleton inside the
/// prediction.
pub fn cldice(pred: &BinaryVolume, gt: &BinaryVolume) -> Result<f64> {
    pred.ensure_same_dims(gt)?;
    let sp = skeletonize(pred)?;
    let sg = skeletonize(gt)?;
    let frac = |skel: &BinaryVolume, other: &BinaryVolume| {
        let n = skel.count();
        let hit = skel.data().iter().zip(other.data()).filter(|(&s, &o)| s && o).count();
        hit as f64 / n as f64
    };
    let precision = frac(&sp, gt);
    let sensitivity = frac(&sg, pred);
    if precision + sensitivity == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * sensitivity / (precision + sensitivity))
}

/// Number of 26-connected foreground components.
pub fn count_components(mask: &BinaryVolume) -> usize {
    let dims = mask.dims();
    let data = mask.data();
    let mut seen = vec![false; data.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if !data[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for n in dims.neighbors(i, Connectivity::TwentySix) {
                if data[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    count
}

#[inline]
const fn cube(dx: i32, dy: i32, dz: i32) -> usize {
    ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as usize
}

const CENTER: usize = 13;

struct CubeGraph {
    adj26: Vec<Vec<usize>>,
    adj6: Vec<Vec<usize>>,
    in_n18: [bool; 27],
    face: [bool; 27],
}

fn cube_graph() -> CubeGraph {
    let pos = |i: usize| [(i % 3) as i32 - 1, ((i / 3) % 3) as i32 - 1, (i / 9) as i32 - 1];
    let mut adj26 = vec![Vec::new(); 27];
    let mut adj6 = vec![Vec::new(); 27];
    let mut in_n18 = [false; 27];
    let mut face = [false; 27];
    for i in 0..27 {
        let p = pos(i);
        let l1: i32 = p.iter().map(|c| c.abs()).sum();
        in_n18[i] = i != CENTER && l1 <= 2;
        face[i] = l1 == 1;
        for j in 0..27 {
            if i == j {
                continue;
            }
            let q = pos(j);
            let diff = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            if diff.iter().all(|d| d.abs() <= 1) {
                adj26[i].push(j);
                if diff.iter().map(|d| d.abs()).sum::<i32>() == 1 {
                    adj6[i].push(j);
                }
            }
        }
    }
    CubeGraph {
        adj26,
        adj6,
        in_n18,
        face,
    }
}

fn components_in(nodes: &[bool; 27], adj: &[Vec<usize>], seeds: impl Fn(usize) -> bool) -> usize {
    let mut seen = [false; 27];
    let mut count = 0;
    let mut stack = Vec::with_capacity(27);
    for s in 0..27 {
        if !nodes[s] || seen[s] || !seeds(s) {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if nodes[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

/// A foreground voxel is simple (deletable without changing topology) when
/// its 26-neighbourhood holds exactly one 26-connected foreground component
/// and its 18-neighbourhood exactly one 6-connected background component
/// touching one of its faces.
fn is_simple(nb: &[bool; 27], g: &CubeGraph) -> bool {
    let mut fg = *nb;
    fg[CENTER] = false;
    if components_in(&fg, &g.adj26, |_| true) != 1 {
        return false;
    }
    let mut bg = [false; 27];
    for i in 0..27 {
        bg[i] = g.in_n18[i] && !nb[i];
    }
    components_in(&bg, &g.adj6, |s| g.face[s]) == 1
}

fn neighborhood(data: &[bool], dims: crate::volume::Dims, i: usize) -> [bool; 27] {
    let [x, y, z] = dims.coord(i);
    let mut nb = [false; 27];
    for dz in -1i32..=1 {
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let (nx, ny, nz) = (x as i64 + dx as i64, y as i64 + dy as i64, z as i64 + dz as i64);
                if nx < 0 || ny < 0 || nz < 0 {
                    continue;
                }
                let c = [nx as usize, ny as usize, nz as usize];
                if dims.contains(c) {
                    nb[cube(dx, dy, dz)] = data[dims.index_of(c)];
                }
            }
        }
    }
    nb
}

/// Medial curves by directional thinning: border voxels are deleted one
/// direction at a time when they are simple and not curve endpoints, each
/// deletion re-checked against the current state so topology (26-connected
/// foreground, 6-connected background) is preserved. Scan order is fixed,
/// so the result is deterministic.
pub fn skeletonize(mask: &BinaryVolume) -> Result<BinaryVolume> {
    if mask.count() == 0 {
        return Err(Error::EmptySet("mask to skeletonize"));
    }
    let g = cube_graph();
    let dims = mask.dims();
    let mut out = mask.clone();
    let directions = [
        cube(0, 0, -1),
        cube(0, 0, 1),
        cube(0, -1, 0),
        cube(0, 1, 0),
        cube(-1, 0, 0),
        cube(1, 0, 0),
    ];
    let deletable = |nb: &[bool; 27]| {
        let neighbors = nb.iter().filter(|&&b| b).count() - 1;
        neighbors > 1 && is_simple(nb, &g)
    };
    loop {
        let mut changed = false;
        for &dir in &directions {
            let data = out.data();
            let candidates: Vec<usize> = (0..data.len())
                .filter(|&i| data[i])
                .filter(|&i| {
                    let nb = neighborhood(data, dims, i);
                    !nb[dir] && deletable(&nb)
                })
                .collect();
            for i in candidates {
                let nb = neighborhood(out.data(), dims, i);
                if deletable(&nb) {
                    out.data_mut()[i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(out)
}
