//! Exact Euclidean distance transform.
//!
//! Separable lower-envelope-of-parabolas algorithm (Felzenszwalb and
//! Huttenlocher), one 1D pass per axis. Squared distances are exact in
//! floating point as long as coordinates are integers and spacing is 1.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, Dims};

/// 1D squared distance transform of `f` with sample spacing `w` (already
/// squared). Infinite entries are treated as "no site".
fn transform_line(f: &[f64], w2: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if k < 0 {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        loop {
            let p = v[k as usize];
            let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64)) / (2.0 * w2 * (q - p) as f64);
            if s <= z[k as usize] {
                k -= 1;
                if k < 0 {
                    break;
                }
            } else {
                break;
            }
        }
        k += 1;
        let ku = k as usize;
        v[ku] = q;
        z[ku] = if ku == 0 {
            f64::NEG_INFINITY
        } else {
            let p = v[ku - 1];
            ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64)) / (2.0 * w2 * (q - p) as f64)
        };
        z[ku + 1] = f64::INFINITY;
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = w2 * d * d + f[v[j]];
    }
}

fn pass(field: &mut [f64], dims: Dims, axis: usize, w2: f64) {
    let ext = dims.as_array();
    let n = ext[axis];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let line_count = ext[o1] * ext[o2];
    let src: &[f64] = field;
    let lines: Vec<Vec<f64>> = (0..line_count)
        .into_par_iter()
        .map(|l| {
            let (i1, i2) = (l % ext[o1], l / ext[o1]);
            let mut c = [0usize; 3];
            c[o1] = i1;
            c[o2] = i2;
            let f: Vec<f64> = (0..n)
                .map(|k| {
                    c[axis] = k;
                    src[dims.index_of(c)]
                })
                .collect();
            let mut out = vec![0.0; n];
            transform_line(&f, w2, &mut out);
            out
        })
        .collect();
    for (l, line) in lines.into_iter().enumerate() {
        let (i1, i2) = (l % ext[o1], l / ext[o1]);
        let mut c = [0usize; 3];
        c[o1] = i1;
        c[o2] = i2;
        for (k, val) in line.into_iter().enumerate() {
            c[axis] = k;
            field[dims.index_of(c)] = val;
        }
    }
}

/// Squared distance from every voxel to the nearest set voxel of `sites`,
/// with per-axis voxel size `spacing`. Infinite when `sites` is empty.
pub fn squared_distance_field(sites: &BinaryVolume, spacing: [f64; 3]) -> Vec<f64> {
    let dims = sites.dims();
    let mut field: Vec<f64> = sites
        .data()
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..3 {
        pass(&mut field, dims, axis, spacing[axis] * spacing[axis]);
    }
    field
}

/// Euclidean distance in voxel units from every voxel to the nearest member
/// of `set`.
pub fn distance_to_set(set: &BinaryVolume) -> Result<Vec<f64>> {
    if !set.data().iter().any(|&b| b) {
        return Err(Error::EmptySet("distance target set"));
    }
    Ok(squared_distance_field(set, [1.0; 3]).into_iter().map(f64::sqrt).collect())
}
