//! Voxel grids shared by every stage of the pipeline.
//!
//! All grids use one linearization: `x` varies fastest and `z` slowest,
//! i.e. `index = (z * ny + y) * nx + x`. This is the same order MetaImage
//! uses for `DimSize = nx ny nz`, so payloads are read and written without
//! reshuffling. Every module goes through [`Dims::index`] and
//! [`Dims::coord`] rather than doing the arithmetic inline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub const fn from_array(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub const fn index_of(&self, c: [usize; 3]) -> usize {
        self.index(c[0], c[1], c[2])
    }

    #[inline]
    pub const fn coord(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let rest = index / self.nx;
        [x, rest % self.ny, rest / self.ny]
    }

    pub const fn contains(&self, c: [usize; 3]) -> bool {
        c[0] < self.nx && c[1] < self.ny && c[2] < self.nz
    }

    /// Linear indices of the in-bounds neighbours of `index`.
    pub fn neighbors(&self, index: usize, connectivity: Connectivity) -> impl Iterator<Item = usize> + '_ {
        let [x, y, z] = self.coord(index);
        let offsets: &'static [[i8; 3]] = connectivity.offsets();
        offsets.iter().filter_map(move |o| {
            let nx = x as isize + o[0] as isize;
            let ny = y as isize + o[1] as isize;
            let nz = z as isize + o[2] as isize;
            if nx < 0 || ny < 0 || nz < 0 {
                return None;
            }
            let c = [nx as usize, ny as usize, nz as usize];
            self.contains(c).then(|| self.index_of(c))
        })
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Voxel adjacency used by region growing and component labeling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    #[default]
    TwentySix,
}

static FACE_OFFSETS: [[i8; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

static FULL_OFFSETS: [[i8; 3]; 26] = {
    let mut out = [[0i8; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

impl Connectivity {
    pub fn offsets(self) -> &'static [[i8; 3]] {
        match self {
            Connectivity::Six => &FACE_OFFSETS,
            Connectivity::TwentySix => &FULL_OFFSETS,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

/// Physical voxel size in millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0; 3])
    }
}

impl Spacing {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidGrid(format!("spacing {:?} must be positive and finite", self.0)))
        }
    }
}

/// A dense 3D grid with spacing metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
}

/// Image intensities, the input volume.
pub type ScalarVolume = Grid3<f32>;

/// Binary voxel mask (ground truth, predictions, voxel sets).
pub type BinaryVolume = Grid3<bool>;

/// Ternary pseudo-label volume.
pub type LabelVolume = Grid3<Label>;

impl<T> Grid3<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidGrid(format!("dims {dims} contain a zero extent")));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match dims {dims} ({} voxels)",
                data.len(),
                dims.len()
            )));
        }
        spacing.validate()?;
        Ok(Grid3 { dims, spacing, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: [usize; 3]) -> &T {
        &self.data[self.dims.index_of(c)]
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_same_dims<U>(&self, other: &Grid3<U>) -> Result<()> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(Error::dims(self.dims, other.dims))
        }
    }
}

impl<T: Clone> Grid3<T> {
    pub fn filled(dims: Dims, value: T) -> Result<Self> {
        Grid3::new(dims, Spacing::default(), vec![value; dims.len()])
    }
}

impl Grid3<f32> {
    /// Fails with [`Error::NonFinite`] on the first NaN or infinite voxel.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }
}

impl Grid3<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Linear indices of set voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn from_indices(dims: Dims, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = Grid3::filled(dims, false)?;
        for i in indices {
            if i >= dims.len() {
                return Err(Error::IndexOutOfRange { value: i, limit: dims.len() });
            }
            mask.data[i] = true;
        }
        Ok(mask)
    }
}

/// Per-voxel pseudo-label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Foreground = 1,
    #[default]
    Unlabeled = 2,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Background),
            1 => Some(Label::Foreground),
            2 => Some(Label::Unlabeled),
            _ => None,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Label::Unlabeled
    }
}

impl Grid3<Label> {
    /// Voxel counts of (background, foreground, unlabeled).
    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for &l in &self.data {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn mask_of(&self, label: Label) -> BinaryVolume {
        self.map(|&l| l == label)
    }
}

/// Per-voxel foreground probability of a two-class prediction.
///
/// Background probability is `1 - p_fg`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume(Grid3<f32>);

impl ProbabilityVolume {
    pub fn new(grid: Grid3<f32>) -> Result<Self> {
        if let Some(index) = grid.data.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidGrid(format!(
                "probability {} at voxel {index} lies outside [0, 1]",
                grid.data[index]
            )));
        }
        Ok(ProbabilityVolume(grid))
    }

    pub fn dims(&self) -> Dims {
        self.0.dims
    }

    pub fn grid(&self) -> &Grid3<f32> {
        &self.0
    }

    pub fn into_grid(self) -> Grid3<f32> {
        self.0
    }

    #[inline]
    pub fn p_fg(&self, index: usize) -> f64 {
        self.0.data[index] as f64
    }

    /// Probability of class `c` (0 = background, 1 = foreground).
    #[inline]
    pub fn p_class(&self, index: usize, class: usize) -> f64 {
        let p = self.p_fg(index);
        if class == 1 {
            p
        } else {
            1.0 - p
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.data.iter().map(|&p| p as f64).collect()
    }
}

/// Two-class argmax with ties (`p_fg == 0.5`) going to foreground.
#[inline]
pub fn argmax_class(p_fg: f64) -> usize {
    usize::from(p_fg >= 0.5)
}

/// Per-volume min-max rescale of intensities to `[0, 1]`.
pub fn normalize_intensity(v: &ScalarVolume) -> Result<ScalarVolume> {
    v.ensure_finite()?;
    let (lo, hi) = v
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x as f64), hi.max(x as f64))
        });
    if lo == hi {
        return Err(Error::DegenerateRange(lo));
    }
    let range = hi - lo;
    Ok(v.map(|&x| (((x as f64 - lo) / range) as f32).clamp(0.0, 1.0)))
}

/// Which side receives the extra voxel when the size difference is odd.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CenterPolicy {
    /// The extra voxel is cropped from (or padded onto) the high end.
    #[default]
    FavorLow,
    /// The extra voxel is cropped from (or padded onto) the low end.
    FavorHigh,
}

/// Value written into padded voxels.
pub trait PadValue: Copy {
    fn pad_value() -> Self;
}

impl PadValue for f32 {
    fn pad_value() -> Self {
        0.0
    }
}

impl PadValue for bool {
    fn pad_value() -> Self {
        false
    }
}

impl PadValue for Label {
    fn pad_value() -> Self {
        Label::Background
    }
}

/// Center-crops axes that are too large and symmetrically zero-pads axes that
/// are too small, independently per axis.
pub fn crop_or_pad<T: PadValue>(v: &Grid3<T>, target: Dims, policy: CenterPolicy) -> Result<Grid3<T>> {
    if target.is_empty() {
        return Err(Error::InvalidGrid(format!("target dims {target} contain a zero extent")));
    }
    let src = v.dims.as_array();
    let dst = target.as_array();
    // Signed offset of the source origin inside the target grid, per axis.
    let mut shift = [0isize; 3];
    for a in 0..3 {
        let diff = dst[a] as isize - src[a] as isize;
        let amount = diff.abs();
        let low_side = match policy {
            CenterPolicy::FavorLow => amount / 2,
            CenterPolicy::FavorHigh => amount - amount / 2,
        };
        shift[a] = diff.signum() * low_side;
    }
    let mut data = vec![T::pad_value(); target.len()];
    for z in 0..dst[2] {
        let sz = z as isize - shift[2];
        if sz < 0 || sz >= src[2] as isize {
            continue;
        }
        for y in 0..dst[1] {
            let sy = y as isize - shift[1];
            if sy < 0 || sy >= src[1] as isize {
                continue;
            }
            for x in 0..dst[0] {
                let sx = x as isize - shift[0];
                if sx < 0 || sx >= src[0] as isize {
                    continue;
                }
                data[target.index(x, y, z)] = v.data[v.dims.index(sx as usize, sy as usize, sz as usize)];
            }
        }
    }
    Grid3::new(target, v.spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims) -> ScalarVolume {
        Grid3::new(dims, Spacing::default(), (0..dims.len()).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn index_and_coord_are_inverse() {
        let d = Dims::new(3, 4, 5);
        for i in 0..d.len() {
            assert_eq!(d.index_of(d.coord(i)), i);
        }
        assert_eq!(d.index(1, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0), 3);
        assert_eq!(d.index(0, 0, 1), 12);
    }

    #[test]
    fn neighbor_counts() {
        let d = Dims::cube(3);
        let center = d.index(1, 1, 1);
        assert_eq!(d.neighbors(center, Connectivity::Six).count(), 6);
        assert_eq!(d.neighbors(center, Connectivity::TwentySix).count(), 26);
        assert_eq!(d.neighbors(0, Connectivity::TwentySix).count(), 7);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid3::new(Dims::cube(2), Spacing::default(), vec![0.0f32; 7]).is_err());
        assert!(Grid3::new(Dims::cube(1), Spacing([1.0, 0.0, 1.0]), vec![0.0f32]).is_err());
        assert!(Grid3::new(Dims::cube(1), Spacing([1.0, f64::NAN, 1.0]), vec![0.0f32]).is_err());
        assert!(ProbabilityVolume::new(Grid3::filled(Dims::cube(1), 1.5).unwrap()).is_err());
    }

    #[test]
    fn normalize_examples() {
        let v = Grid3::new(Dims::new(3, 1, 1), Spacing::default(), vec![0.0, 50.0, 100.0]).unwrap();
        assert_eq!(normalize_intensity(&v).unwrap().data(), &[0.0, 0.5, 1.0]);
        let c = Grid3::filled(Dims::cube(2), 3.0f32).unwrap();
        assert!(matches!(normalize_intensity(&c), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn normalize_is_idempotent() {
        let v = ramp(Dims::new(4, 3, 2));
        let once = normalize_intensity(&v).unwrap();
        let twice = normalize_intensity(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn crop_keeps_center() {
        let v = ramp(Dims::cube(6));
        let c = crop_or_pad(&v, Dims::cube(4), CenterPolicy::default()).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(*c.at([x, y, z]), *v.at([x + 1, y + 1, z + 1]));
                }
            }
        }
    }

    #[test]
    fn pad_adds_one_plane_per_side() {
        let v = Grid3::filled(Dims::cube(4), 1.0f32).unwrap();
        let p = crop_or_pad(&v, Dims::cube(6), CenterPolicy::default()).unwrap();
        assert_eq!(p.data().iter().filter(|&&x| x == 1.0).count(), 64);
        assert_eq!(*p.at([0, 2, 2]), 0.0);
        assert_eq!(*p.at([5, 2, 2]), 0.0);
        assert_eq!(*p.at([1, 1, 1]), 1.0);
        assert_eq!(*p.at([4, 4, 4]), 1.0);
    }

    #[test]
    fn label_padding_is_background() {
        let v = Grid3::filled(Dims::cube(2), Label::Foreground).unwrap();
        let p = crop_or_pad(&v, Dims::cube(4), CenterPolicy::default()).unwrap();
        assert_eq!(p.class_counts(), [56, 8, 0]);
    }

    #[test]
    fn odd_differences_follow_policy() {
        let v = ramp(Dims::new(5, 1, 1));
        let low = crop_or_pad(&v, Dims::new(4, 1, 1), CenterPolicy::FavorLow).unwrap();
        assert_eq!(low.data(), &[0.0, 1.0, 2.0, 3.0]);
        let high = crop_or_pad(&v, Dims::new(4, 1, 1), CenterPolicy::FavorHigh).unwrap();
        assert_eq!(high.data(), &[1.0, 2.0, 3.0, 4.0]);

        let w = ramp(Dims::new(2, 1, 1));
        let low = crop_or_pad(&w, Dims::new(3, 1, 1), CenterPolicy::FavorLow).unwrap();
        assert_eq!(low.data(), &[0.0, 1.0, 0.0]);
        let high = crop_or_pad(&w, Dims::new(3, 1, 1), CenterPolicy::FavorHigh).unwrap();
        assert_eq!(high.data(), &[0.0, 0.0, 1.0]);
    }
}
