#![allow(dead_code)]

use mipseg::{BinaryVolume, Dims, Grid3, ScalarVolume, Spacing};
use proptest::prelude::*;

pub fn dims_upto(max: usize) -> impl Strategy<Value = Dims> {
    (1..=max, 1..=max, 1..=max).prop_map(|(x, y, z)| Dims::new(x, y, z))
}

pub fn volume_in(max: usize) -> impl Strategy<Value = ScalarVolume> {
    dims_upto(max).prop_flat_map(|d| {
        proptest::collection::vec(0.0f32..=1.0, d.len())
            .prop_map(move |v| Grid3::new(d, Spacing::default(), v).unwrap())
    })
}

pub fn mask_in(max: usize) -> impl Strategy<Value = BinaryVolume> {
    dims_upto(max).prop_flat_map(|d| {
        proptest::collection::vec(any::<bool>(), d.len())
            .prop_map(move |v| Grid3::new(d, Spacing::default(), v).unwrap())
    })
}

/// Pairs of masks of equal dims, each non-empty.
pub fn mask_pair(max: usize) -> impl Strategy<Value = (BinaryVolume, BinaryVolume)> {
    dims_upto(max).prop_flat_map(|d| {
        let one = move || {
            proptest::collection::vec(any::<bool>(), d.len()).prop_map(move |mut v| {
                if !v.iter().any(|&b| b) {
                    v[0] = true;
                }
                Grid3::new(d, Spacing::default(), v).unwrap()
            })
        };
        (one(), one())
    })
}

/// All 26 (or 6) neighbour coordinates of `c` inside `dims`, by brute force.
pub fn brute_neighbors(dims: Dims, c: [usize; 3], full: bool) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                if manhattan == 0 || (!full && manhattan != 1) {
                    continue;
                }
                let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                let ext = dims.as_array();
                if (0..3).all(|a| n[a] >= 0 && (n[a] as usize) < ext[a]) {
                    out.push(n.map(|v| v as usize));
                }
            }
        }
    }
    out
}
