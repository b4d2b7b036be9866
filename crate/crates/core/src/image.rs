//! Volume/image ingestion (MetaImage .mhd/.raw), multilinear interpolation
//! with analytic in-cell gradients, binary masks and landmark files.
//!
//! Voxel flat index has x fastest (MetaImage raw ordering); voxel `i` is
//! centered at world position `origin + i * spacing` per axis.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("mask contains no foreground voxels")]
    EmptyMask,
    #[error("landmark {index} = {point:?} out of image bounds {dims:?} ({path})")]
    OutOfBounds {
        path: PathBuf,
        index: usize,
        point: Vec<f64>,
        dims: Vec<usize>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Voxel element types supported on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Uchar,
    Short,
    Ushort,
    Float,
}

impl ElementType {
    fn from_key(s: &str) -> Option<Self> {
        match s {
            "MET_UCHAR" => Some(Self::Uchar),
            "MET_SHORT" => Some(Self::Short),
            "MET_USHORT" => Some(Self::Ushort),
            "MET_FLOAT" => Some(Self::Float),
            _ => None,
        }
    }
    fn key(&self) -> &'static str {
        match self {
            Self::Uchar => "MET_UCHAR",
            Self::Short => "MET_SHORT",
            Self::Ushort => "MET_USHORT",
            Self::Float => "MET_FLOAT",
        }
    }
    fn size(&self) -> usize {
        match self {
            Self::Uchar => 1,
            Self::Short | Self::Ushort => 2,
            Self::Float => 4,
        }
    }
}

/// Scalar image on a regular grid with physical spacing and origin (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Image<const D: usize> {
    pub dims: [usize; D],
    pub spacing: [f64; D],
    pub origin: [f64; D],
    pub voxels: Vec<f64>,
}

/// Binary mask sharing the geometry of its paired image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask<const D: usize> {
    pub dims: [usize; D],
    pub spacing: [f64; D],
    pub origin: [f64; D],
    pub voxels: Vec<u8>,
}

/// Paired anatomical landmarks in 0-based voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet<const D: usize> {
    pub points: Vec<[f64; D]>,
}

/// Result of one interpolated lookup.
#[derive(Debug, Clone, Copy)]
pub struct LinearSample<const D: usize> {
    pub value: f64,
    /// Exact in-cell gradient of the multilinear interpolant, per voxel unit.
    pub grad: [f64; D],
    /// True when the query point was clamped to the volume bounds.
    pub clamped: bool,
}

impl<const D: usize> Image<D> {
    pub fn new(dims: [usize; D], spacing: [f64; D], origin: [f64; D], voxels: Vec<f64>) -> Self {
        assert_eq!(voxels.len(), dims.iter().product::<usize>());
        Self {
            dims,
            spacing,
            origin,
            voxels,
        }
    }

    /// Flat index with axis 0 fastest.
    #[inline]
    pub fn flat_index(&self, idx: [usize; D]) -> usize {
        let mut flat = 0;
        for a in (0..D).rev() {
            flat = flat * self.dims[a] + idx[a];
        }
        flat
    }

    #[inline]
    pub fn voxel_to_world(&self, v: &[f64; D]) -> [f64; D] {
        let mut w = [0.0; D];
        for a in 0..D {
            w[a] = self.origin[a] + v[a] * self.spacing[a];
        }
        w
    }

    #[inline]
    pub fn world_to_voxel(&self, w: &[f64; D]) -> [f64; D] {
        let mut v = [0.0; D];
        for a in 0..D {
            v[a] = (w[a] - self.origin[a]) / self.spacing[a];
        }
        v
    }
}

impl<const D: usize> Mask<D> {
    pub fn from_image(img: &Image<D>) -> Result<Self, ImageError> {
        let mut voxels = Vec::with_capacity(img.voxels.len());
        for &v in &img.voxels {
            if v != 0.0 && v != 1.0 {
                return Err(ImageError::GeometryMismatch(format!(
                    "mask voxel value {v} is not 0/1"
                )));
            }
            voxels.push(v as u8);
        }
        Ok(Self {
            dims: img.dims,
            spacing: img.spacing,
            origin: img.origin,
            voxels,
        })
    }

    pub fn matches_geometry(&self, img: &Image<D>) -> bool {
        self.dims == img.dims && self.spacing == img.spacing && self.origin == img.origin
    }
}

/// Voxel-center coordinates of all foreground voxels, in deterministic
/// raster order (axis 0 fastest).
pub fn mask_points<const D: usize>(mask: &Mask<D>) -> Result<Vec<[f64; D]>, ImageError> {
    let mut points = Vec::new();
    for (flat, &v) in mask.voxels.iter().enumerate() {
        if v != 0 {
            let mut rem = flat;
            let mut idx = [0.0; D];
            for a in 0..D {
                idx[a] = (rem % mask.dims[a]) as f64;
                rem /= mask.dims[a];
            }
            points.push(idx);
        }
    }
    if points.is_empty() {
        return Err(ImageError::EmptyMask);
    }
    Ok(points)
}

/// Voxel-center coordinates of every voxel (whole-domain sampling pool).
pub fn all_points<const D: usize>(dims: [usize; D]) -> Vec<[f64; D]> {
    let n: usize = dims.iter().product();
    let mut points = Vec::with_capacity(n);
    for flat in 0..n {
        let mut rem = flat;
        let mut idx = [0.0; D];
        for a in 0..D {
            idx[a] = (rem % dims[a]) as f64;
            rem /= dims[a];
        }
        points.push(idx);
    }
    points
}

/// Multilinear interpolation at voxel coordinates `x`, clamped to bounds.
pub fn sample_linear<const D: usize>(img: &Image<D>, x: [f64; D]) -> LinearSample<D> {
    let mut clamped = false;
    let mut base = [0usize; D];
    let mut t = [0.0; D];
    for a in 0..D {
        let hi = (img.dims[a] - 1) as f64;
        let mut xa = x[a];
        if !(0.0..=hi).contains(&xa) {
            xa = xa.clamp(0.0, hi);
            clamped = true;
        }
        // cell index in [0, dims-2] so t stays in [0, 1]
        let c = (xa.floor() as usize).min(img.dims[a].saturating_sub(2));
        base[a] = c;
        t[a] = xa - c as f64;
    }

    let mut value = 0.0;
    let mut grad = [0.0; D];
    for corner in 0..(1usize << D) {
        let mut idx = base;
        let mut w = 1.0;
        for a in 0..D {
            if corner >> a & 1 == 1 {
                idx[a] += 1;
            }
        }
        for a in 0..D {
            w *= if corner >> a & 1 == 1 { t[a] } else { 1.0 - t[a] };
        }
        let v = img.voxels[img.flat_index(idx)];
        value += w * v;
        for g in 0..D {
            let mut dw = 1.0;
            for a in 0..D {
                let high = corner >> a & 1 == 1;
                dw *= if a == g {
                    if high {
                        1.0
                    } else {
                        -1.0
                    }
                } else if high {
                    t[a]
                } else {
                    1.0 - t[a]
                };
            }
            grad[g] += dw * v;
        }
    }
    LinearSample {
        value,
        grad,
        clamped,
    }
}

fn parse_usizes<const D: usize>(path: &Path, key: &str, val: &str) -> Result<[usize; D], ImageError> {
    let parts: Vec<_> = val.split_whitespace().collect();
    if parts.len() != D {
        return Err(ImageError::Parse {
            path: path.to_path_buf(),
            msg: format!("{key} needs {D} values, got {}", parts.len()),
        });
    }
    let mut out = [0usize; D];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| ImageError::Parse {
            path: path.to_path_buf(),
            msg: format!("bad integer '{p}' in {key}"),
        })?;
    }
    Ok(out)
}

fn parse_f64s<const D: usize>(path: &Path, key: &str, val: &str) -> Result<[f64; D], ImageError> {
    let parts: Vec<_> = val.split_whitespace().collect();
    if parts.len() != D {
        return Err(ImageError::Parse {
            path: path.to_path_buf(),
            msg: format!("{key} needs {D} values, got {}", parts.len()),
        });
    }
    let mut out = [0.0; D];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| ImageError::Parse {
            path: path.to_path_buf(),
            msg: format!("bad number '{p}' in {key}"),
        })?;
    }
    Ok(out)
}

/// Load a MetaImage header + raw pair. Missing ElementSpacing defaults to
/// 1.0 per axis with a warning.
pub fn load_metaimage<const D: usize>(path: &Path) -> Result<Image<D>, ImageError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut ndims = None;
    let mut dims = None;
    let mut spacing = None;
    let mut origin = [0.0; D];
    let mut elem_type = None;
    let mut data_file = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, val)) = line.split_once('=') else {
            return Err(ImageError::Parse {
                path: path.to_path_buf(),
                msg: format!("line '{line}' is not 'Key = Value'"),
            });
        };
        let key = key.trim();
        let val = val.trim();
        match key {
            "NDims" => {
                let n: usize = val.parse().map_err(|_| ImageError::Parse {
                    path: path.to_path_buf(),
                    msg: format!("bad NDims '{val}'"),
                })?;
                if n != D {
                    return Err(ImageError::Parse {
                        path: path.to_path_buf(),
                        msg: format!("NDims = {n}, expected {D}"),
                    });
                }
                ndims = Some(n);
            }
            "DimSize" => dims = Some(parse_usizes::<D>(path, key, val)?),
            "ElementSpacing" => spacing = Some(parse_f64s::<D>(path, key, val)?),
            "Offset" | "Origin" | "Position" => origin = parse_f64s::<D>(path, key, val)?,
            "ElementType" => {
                elem_type = Some(ElementType::from_key(val).ok_or_else(|| ImageError::Parse {
                    path: path.to_path_buf(),
                    msg: format!("unsupported ElementType '{val}'"),
                })?)
            }
            "ElementDataFile" => {
                if val.eq_ignore_ascii_case("LOCAL") || val.contains('%') {
                    return Err(ImageError::Parse {
                        path: path.to_path_buf(),
                        msg: "only single-file ElementDataFile references are supported".into(),
                    });
                }
                data_file = Some(val.to_string());
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB"
                if val.eq_ignore_ascii_case("true") =>
            {
                return Err(ImageError::Parse {
                    path: path.to_path_buf(),
                    msg: "big-endian raw data is not supported".into(),
                });
            }
            // ObjectType, BinaryData, CompressedData, TransformMatrix, ...
            _ => {}
        }
    }
    if ndims.is_none() {
        return Err(ImageError::Parse {
            path: path.to_path_buf(),
            msg: "missing NDims".into(),
        });
    }
    let dims = dims.ok_or_else(|| ImageError::Parse {
        path: path.to_path_buf(),
        msg: "missing DimSize".into(),
    })?;
    if dims.iter().any(|&n| n < 2) {
        return Err(ImageError::Parse {
            path: path.to_path_buf(),
            msg: format!("DimSize must be >= 2 per axis, got {dims:?}"),
        });
    }
    let spacing = spacing.unwrap_or_else(|| {
        log::warn!("{}: missing ElementSpacing, defaulting to 1.0", path.display());
        [1.0; D]
    });
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(ImageError::Parse {
            path: path.to_path_buf(),
            msg: format!("ElementSpacing must be positive, got {spacing:?}"),
        });
    }
    let elem_type = elem_type.ok_or_else(|| ImageError::Parse {
        path: path.to_path_buf(),
        msg: "missing ElementType".into(),
    })?;
    let data_file = data_file.ok_or_else(|| ImageError::Parse {
        path: path.to_path_buf(),
        msg: "missing ElementDataFile".into(),
    })?;

    let raw_path = path.parent().unwrap_or_else(|| Path::new(".")).join(&data_file);
    let raw = fs::read(&raw_path).map_err(|e| ImageError::Parse {
        path: path.to_path_buf(),
        msg: format!("cannot read raw file {}: {e}", raw_path.display()),
    })?;
    let count: usize = dims.iter().product();
    let expected = count * elem_type.size();
    if raw.len() != expected {
        return Err(ImageError::SizeMismatch {
            path: raw_path,
            expected,
            found: raw.len(),
        });
    }
    let mut voxels = Vec::with_capacity(count);
    match elem_type {
        ElementType::Uchar => voxels.extend(raw.iter().map(|&b| b as f64)),
        ElementType::Short => {
            for c in raw.chunks_exact(2) {
                voxels.push(i16::from_le_bytes([c[0], c[1]]) as f64);
            }
        }
        ElementType::Ushort => {
            for c in raw.chunks_exact(2) {
                voxels.push(u16::from_le_bytes([c[0], c[1]]) as f64);
            }
        }
        ElementType::Float => {
            for c in raw.chunks_exact(4) {
                voxels.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
    }
    Ok(Image {
        dims,
        spacing,
        origin,
        voxels,
    })
}

/// Write a MetaImage header + raw pair; `path` should end in `.mhd`.
pub fn save_metaimage<const D: usize>(
    img: &Image<D>,
    path: &Path,
    elem_type: ElementType,
) -> Result<(), ImageError> {
    let raw_name = path
        .with_extension("raw")
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data.raw".into());

    let mut header = String::new();
    let _ = writeln!(header, "ObjectType = Image");
    let _ = writeln!(header, "NDims = {D}");
    let _ = writeln!(header, "BinaryData = True");
    let _ = writeln!(header, "BinaryDataByteOrderMSB = False");
    let join = |vals: &[String]| vals.join(" ");
    let _ = writeln!(
        header,
        "DimSize = {}",
        join(&img.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>())
    );
    let _ = writeln!(
        header,
        "ElementSpacing = {}",
        join(&img.spacing.iter().map(|s| format!("{s}")).collect::<Vec<_>>())
    );
    let _ = writeln!(
        header,
        "Offset = {}",
        join(&img.origin.iter().map(|o| format!("{o}")).collect::<Vec<_>>())
    );
    let _ = writeln!(header, "ElementType = {}", elem_type.key());
    let _ = writeln!(header, "ElementDataFile = {raw_name}");
    fs::write(path, header).map_err(|e| io_err(path, e))?;

    let raw_path = path.with_extension("raw");
    let mut raw = Vec::with_capacity(img.voxels.len() * elem_type.size());
    for &v in &img.voxels {
        match elem_type {
            ElementType::Uchar => raw.push(v as u8),
            ElementType::Short => raw.extend_from_slice(&(v as i16).to_le_bytes()),
            ElementType::Ushort => raw.extend_from_slice(&(v as u16).to_le_bytes()),
            ElementType::Float => raw.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    fs::write(&raw_path, raw).map_err(|e| io_err(&raw_path, e))?;
    Ok(())
}

/// Load landmarks: one whitespace-separated d-tuple per line, 1-based voxel
/// indices on disk, converted to 0-based and validated against `dims`.
pub fn load_landmarks<const D: usize>(
    path: &Path,
    dims: [usize; D],
) -> Result<LandmarkSet<D>, ImageError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<_> = line.split_whitespace().collect();
        if parts.len() != D {
            return Err(ImageError::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: expected {D} values, got {}", lineno + 1, parts.len()),
            });
        }
        let mut p = [0.0; D];
        for (o, s) in p.iter_mut().zip(&parts) {
            let v: f64 = s.parse().map_err(|_| ImageError::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: bad number '{s}'", lineno + 1),
            })?;
            *o = v - 1.0; // 1-based on disk
        }
        let inside = (0..D).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64);
        if !inside {
            return Err(ImageError::OutOfBounds {
                path: path.to_path_buf(),
                index: points.len(),
                point: p.to_vec(),
                dims: dims.to_vec(),
            });
        }
        points.push(p);
    }
    Ok(LandmarkSet { points })
}
