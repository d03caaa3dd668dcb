//! MetaImage (`.mhd` + `.raw`, or single-file `.mha`) reading and writing.
//!
//! Only the uncompressed subset is supported, with element types
//! `MET_UCHAR`, `MET_SHORT`, `MET_USHORT` and `MET_FLOAT`. Files are always
//! written little-endian; big-endian payloads are accepted on read.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::{FeatureGrid2D, FeatureGrid3D};
use crate::projection::Mip2D;
use crate::volume::{BinaryVolume, Dims, Grid3, Label, LabelVolume, ProbabilityVolume, ScalarVolume, Spacing};

#[derive(Clone, Debug, PartialEq)]
pub enum ElementData {
    UChar(Vec<u8>),
    Short(Vec<i16>),
    UShort(Vec<u16>),
    Float(Vec<f32>),
}

impl ElementData {
    pub fn type_name(&self) -> &'static str {
        match self {
            ElementData::UChar(_) => "MET_UCHAR",
            ElementData::Short(_) => "MET_SHORT",
            ElementData::UShort(_) => "MET_USHORT",
            ElementData::Float(_) => "MET_FLOAT",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ElementData::UChar(v) => v.len(),
            ElementData::Short(v) => v.len(),
            ElementData::UShort(v) => v.len(),
            ElementData::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Converts every element to `f32` without rescaling.
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            ElementData::UChar(v) => v.iter().map(|&x| x as f32).collect(),
            ElementData::Short(v) => v.iter().map(|&x| x as f32).collect(),
            ElementData::UShort(v) => v.iter().map(|&x| x as f32).collect(),
            ElementData::Float(v) => v.clone(),
        }
    }

    fn element_size(type_name: &str) -> Option<usize> {
        match type_name {
            "MET_UCHAR" => Some(1),
            "MET_SHORT" | "MET_USHORT" => Some(2),
            "MET_FLOAT" => Some(4),
            _ => None,
        }
    }

    fn decode(type_name: &str, bytes: &[u8], big_endian: bool) -> Result<Self> {
        macro_rules! decode {
            ($t:ty, $n:expr) => {
                bytes
                    .chunks_exact($n)
                    .map(|c| {
                        let arr: [u8; $n] = c.try_into().unwrap();
                        if big_endian {
                            <$t>::from_be_bytes(arr)
                        } else {
                            <$t>::from_le_bytes(arr)
                        }
                    })
                    .collect()
            };
        }
        Ok(match type_name {
            "MET_UCHAR" => ElementData::UChar(bytes.to_vec()),
            "MET_SHORT" => ElementData::Short(decode!(i16, 2)),
            "MET_USHORT" => ElementData::UShort(decode!(u16, 2)),
            "MET_FLOAT" => ElementData::Float(decode!(f32, 4)),
            other => return Err(Error::UnsupportedElementType(other.to_string())),
        })
    }

    fn encode_le(&self) -> Vec<u8> {
        match self {
            ElementData::UChar(v) => v.clone(),
            ElementData::Short(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ElementData::UShort(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ElementData::Float(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

/// An n-dimensional MetaImage payload with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaImage {
    pub dim_size: Vec<usize>,
    pub spacing: Vec<f64>,
    pub data: ElementData,
}

impl MetaImage {
    pub fn new(dim_size: Vec<usize>, spacing: Vec<f64>, data: ElementData) -> Result<Self> {
        if dim_size.is_empty() || dim_size.len() != spacing.len() {
            return Err(Error::Header(format!(
                "{} extents but {} spacing values",
                dim_size.len(),
                spacing.len()
            )));
        }
        let expected: usize = dim_size.iter().product();
        if expected != data.len() {
            return Err(Error::SizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(MetaImage { dim_size, spacing, data })
    }

    /// Interprets the image as a 3D grid; 2D images get a unit z extent.
    pub fn dims3(&self) -> Result<(Dims, Spacing)> {
        match (self.dim_size.as_slice(), self.spacing.as_slice()) {
            ([x, y, z], [sx, sy, sz]) => Ok((Dims::new(*x, *y, *z), Spacing([*sx, *sy, *sz]))),
            ([x, y], [sx, sy]) => Ok((Dims::new(*x, *y, 1), Spacing([*sx, *sy, 1.0]))),
            _ => Err(Error::Unsupported(format!("NDims = {} (expected 3)", self.dim_size.len()))),
        }
    }
}

struct Header {
    ndims: Option<usize>,
    dim_size: Option<Vec<usize>>,
    spacing: Option<Vec<f64>>,
    element_type: Option<String>,
    big_endian: bool,
    data_file: Option<String>,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Header(format!("{key} = {v} is not a boolean"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Header(format!("{key}: cannot parse `{t}`"))))
        .collect()
}

/// Parses header lines up to and including `ElementDataFile`. Returns the
/// header and the byte offset just past that line.
fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut h = Header {
        ndims: None,
        dim_size: None,
        spacing: None,
        element_type: None,
        big_endian: false,
        data_file: None,
    };
    let mut offset = 0;
    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |p| offset + p);
        let line = std::str::from_utf8(&bytes[offset..end])
            .map_err(|_| Error::Header("header is not valid text".into()))?
            .trim();
        offset = (end + 1).min(bytes.len());
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Header(format!("line without `=`: {line}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "ObjectType" if value != "Image" => {
                return Err(Error::Unsupported(format!("ObjectType = {value}")));
            }
            "NDims" => {
                h.ndims = Some(value.parse().map_err(|_| Error::Header(format!("NDims = {value}")))?);
            }
            "DimSize" => h.dim_size = Some(parse_list(key, value)?),
            "ElementSpacing" => h.spacing = Some(parse_list(key, value)?),
            "ElementType" => h.element_type = Some(value.to_string()),
            "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" | "ByteOrderMSB" => {
                h.big_endian = parse_bool(key, value)?;
            }
            "CompressedData" if parse_bool(key, value)? => {
                return Err(Error::Unsupported("compressed payloads".into()));
            }
            "ElementNumberOfChannels" if value != "1" => {
                return Err(Error::Unsupported(format!("{value} channels per element")));
            }
            "ElementDataFile" => {
                h.data_file = Some(value.to_string());
                return Ok((h, offset));
            }
            _ => {}
        }
    }
    Err(Error::Header("missing ElementDataFile".into()))
}

pub fn read_metaimage(path: impl AsRef<Path>) -> Result<MetaImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, offset) = parse_header(&bytes)?;

    let element_type = header
        .element_type
        .ok_or_else(|| Error::Header("missing ElementType".into()))?;
    let element_size =
        ElementData::element_size(&element_type).ok_or(Error::UnsupportedElementType(element_type.clone()))?;
    let dim_size = header.dim_size.ok_or_else(|| Error::Header("missing DimSize".into()))?;
    let ndims = header.ndims.unwrap_or(dim_size.len());
    if ndims != dim_size.len() {
        return Err(Error::Header(format!("NDims = {ndims} but DimSize has {} entries", dim_size.len())));
    }
    let spacing = header.spacing.unwrap_or_else(|| vec![1.0; ndims]);
    if spacing.len() != ndims {
        return Err(Error::Header(format!(
            "NDims = {ndims} but ElementSpacing has {} entries",
            spacing.len()
        )));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Header(format!("ElementSpacing {spacing:?} must be positive")));
    }

    let data_file = header.data_file.unwrap_or_default();
    let payload: std::borrow::Cow<'_, [u8]> = if data_file == "LOCAL" {
        (&bytes[offset..]).into()
    } else {
        let raw = resolve_payload(path, &data_file);
        if !raw.is_file() {
            return Err(Error::MissingPayload(raw));
        }
        fs::read(&raw).map_err(|e| Error::io(&raw, e))?.into()
    };

    let expected = dim_size.iter().product::<usize>() * element_size;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data = ElementData::decode(&element_type, &payload, header.big_endian)?;
    MetaImage::new(dim_size, spacing, data)
}

fn resolve_payload(header_path: &Path, data_file: &str) -> PathBuf {
    let p = Path::new(data_file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        header_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn header_text(img: &MetaImage, data_file: &str) -> String {
    let join = |v: Vec<String>| v.join(" ");
    format!(
        "ObjectType = Image\n\
         NDims = {}\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         ElementSpacing = {}\n\
         DimSize = {}\n\
         ElementType = {}\n\
         ElementDataFile = {}\n",
        img.dim_size.len(),
        join(img.spacing.iter().map(|s| s.to_string()).collect()),
        join(img.dim_size.iter().map(|s| s.to_string()).collect()),
        img.data.type_name(),
        data_file,
    )
}

/// Writes `img` to `path`. A `.mha` extension produces a single file;
/// anything else produces the header at `path` plus a sibling `.raw`.
pub fn write_metaimage(path: impl AsRef<Path>, img: &MetaImage) -> Result<()> {
    let path = path.as_ref();
    let payload = img.data.encode_le();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mha")) {
        let mut bytes = header_text(img, "LOCAL").into_bytes();
        bytes.extend_from_slice(&payload);
        return fs::write(path, bytes).map_err(|e| Error::io(path, e));
    }
    let raw = path.with_extension("raw");
    let raw_name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Header(format!("cannot derive payload name from {}", path.display())))?;
    fs::write(path, header_text(img, raw_name)).map_err(|e| Error::io(path, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

/// Loads a 3D intensity volume. Integer payloads are converted to float
/// without rescaling; non-finite values are rejected.
pub fn load_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let img = read_metaimage(path)?;
    if img.dim_size.len() != 3 {
        return Err(Error::Unsupported(format!("NDims = {} (expected 3)", img.dim_size.len())));
    }
    let (dims, spacing) = img.dims3()?;
    let v = Grid3::new(dims, spacing, img.data.to_f32())?;
    v.ensure_finite()?;
    Ok(v)
}

pub fn load_probability(path: impl AsRef<Path>) -> Result<ProbabilityVolume> {
    ProbabilityVolume::new(load_volume(path)?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let img = read_metaimage(path)?;
    let (dims, spacing) = img.dims3()?;
    let ElementData::UChar(raw) = img.data else {
        return Err(Error::UnsupportedElementType(format!(
            "{} (label volumes must be MET_UCHAR)",
            img.data.type_name()
        )));
    };
    let labels = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            Label::from_u8(v).ok_or_else(|| Error::InvalidGrid(format!("label value {v} at voxel {i} is not 0, 1 or 2")))
        })
        .collect::<Result<Vec<_>>>()?;
    Grid3::new(dims, spacing, labels)
}

/// Loads a binary mask; any nonzero voxel is set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryVolume> {
    let img = read_metaimage(path)?;
    let (dims, spacing) = img.dims3()?;
    let bits = img.data.to_f32().into_iter().map(|v| v != 0.0).collect();
    Grid3::new(dims, spacing, bits)
}

/// Grids that can be written as a 3D MetaImage.
pub trait ToMetaImage {
    fn to_metaimage(&self) -> Result<MetaImage>;
}

fn image3<T>(g: &Grid3<T>, data: ElementData) -> Result<MetaImage> {
    MetaImage::new(g.dims().as_array().to_vec(), g.spacing().0.to_vec(), data)
}

impl ToMetaImage for ScalarVolume {
    fn to_metaimage(&self) -> Result<MetaImage> {
        self.ensure_finite()?;
        image3(self, ElementData::Float(self.data().to_vec()))
    }
}

impl ToMetaImage for ProbabilityVolume {
    fn to_metaimage(&self) -> Result<MetaImage> {
        self.grid().to_metaimage()
    }
}

impl ToMetaImage for LabelVolume {
    fn to_metaimage(&self) -> Result<MetaImage> {
        image3(self, ElementData::UChar(self.data().iter().map(|&l| l as u8).collect()))
    }
}

impl ToMetaImage for BinaryVolume {
    fn to_metaimage(&self) -> Result<MetaImage> {
        image3(self, ElementData::UChar(self.data().iter().map(|&b| u8::from(b)).collect()))
    }
}

/// Labels and masks are written as `MET_UCHAR`, intensities and
/// probabilities as `MET_FLOAT`.
pub fn save_volume<V: ToMetaImage + ?Sized>(v: &V, path: impl AsRef<Path>) -> Result<()> {
    write_metaimage(path, &v.to_metaimage()?)
}

/// Loads a feature grid: a 3D image is one channel, a 4D image stores the
/// channel as its last (slowest) axis.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureGrid3D> {
    let img = read_metaimage(path)?;
    let (dims, channels) = match img.dim_size.as_slice() {
        &[x, y, z] => (Dims::new(x, y, z), 1),
        &[x, y, z, c] => (Dims::new(x, y, z), c),
        other => return Err(Error::Unsupported(format!("NDims = {} for a feature grid", other.len()))),
    };
    FeatureGrid3D::new(channels, dims, img.data.to_f32())
}

/// Writes a retrieved 2D feature map as a `width x height x channels`
/// float image.
pub fn save_feature_map(f: &FeatureGrid2D, path: impl AsRef<Path>) -> Result<()> {
    let img = MetaImage::new(
        vec![f.width, f.height, f.channels],
        vec![1.0; 3],
        ElementData::Float(f.values.clone()),
    )?;
    write_metaimage(path, &img)
}

/// Writes a projection's index map as a 2D `MET_USHORT` image.
pub fn save_index_map(mip: &Mip2D, path: impl AsRef<Path>) -> Result<()> {
    let index = mip
        .index
        .iter()
        .map(|&k| u16::try_from(k).map_err(|_| Error::Unsupported(format!("depth index {k} exceeds 16 bits"))))
        .collect::<Result<Vec<_>>>()?;
    let img = MetaImage::new(vec![mip.width, mip.height], vec![1.0; 2], ElementData::UShort(index))?;
    write_metaimage(path, &img)
}

/// Reads a 2D index map as `(width, height, indices)`.
pub fn load_index_map(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u32>)> {
    let img = read_metaimage(path)?;
    let (dims, _) = img.dims3()?;
    if dims.nz != 1 {
        return Err(Error::Unsupported(format!("index map must be 2D, got {dims}")));
    }
    let index = match img.data {
        ElementData::UChar(v) => v.into_iter().map(u32::from).collect(),
        ElementData::UShort(v) => v.into_iter().map(u32::from).collect(),
        ElementData::Short(v) => v
            .into_iter()
            .map(|k| u32::try_from(k).map_err(|_| Error::InvalidGrid(format!("negative index {k}"))))
            .collect::<Result<_>>()?,
        ElementData::Float(v) => v
            .into_iter()
            .map(|k| {
                if k >= 0.0 && k.fract() == 0.0 && k <= u32::MAX as f32 {
                    Ok(k as u32)
                } else {
                    Err(Error::InvalidGrid(format!("index value {k} is not a non-negative integer")))
                }
            })
            .collect::<Result<_>>()?,
    };
    Ok((dims.nx, dims.ny, index))
}
