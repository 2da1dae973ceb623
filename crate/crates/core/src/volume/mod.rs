//! 4D grayscale volumes indexed `(t, z, y, x)`.
//!
//! Volumes come from a directory of slice images (one file per `(t, z)`), from
//! the raw container written by [`write_raw`], or from the synthetic generator
//! in [`synth`]. Slices are `H` rows by `W` columns; a 500x502 slice therefore
//! has `H = 500`, `W = 502`.

pub mod synth;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use regex::Regex;

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, GroundTruth, GroundTruthTrack, Phenotype, SynthSpec};

/// Magic bytes opening every raw container file.
pub const RAW_MAGIC: &[u8; 8] = b"MTK4VOL\0";

/// Extents of a 4D volume: frames, slices, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims4 {
    pub t: usize,
    pub z: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn new(t: usize, z: usize, h: usize, w: usize) -> Self {
        Dims4 { t, z, h, w }
    }

    pub fn len(&self) -> usize {
        self.t * self.z * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.t, self.z, self.h, self.w]
    }

    fn validate(&self) -> Result<()> {
        if self.t == 0 || self.z == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Invalid(format!(
                "all volume dims must be >= 1, got {:?}",
                self.as_array()
            )));
        }
        Ok(())
    }
}

/// Dense `f(t, z, y, x)` intensity tensor stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: Dims4,
    data: Vec<f32>,
}

impl Volume4D {
    pub fn new(dims: Dims4, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::Invalid(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims.as_array(),
                dims.len()
            )));
        }
        Ok(Volume4D { dims, data })
    }

    pub fn zeros(dims: Dims4) -> Result<Self> {
        dims.validate()?;
        Ok(Volume4D {
            dims,
            data: vec![0.0; dims.len()],
        })
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, t: usize, z: usize, y: usize, x: usize) -> usize {
        let d = &self.dims;
        ((t * d.z + z) * d.h + y) * d.w + x
    }

    #[inline]
    pub fn get(&self, t: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(t, z, y, x)]
    }

    /// One `H x W` slice, row-major.
    pub fn slice(&self, t: usize, z: usize) -> &[f32] {
        let n = self.dims.h * self.dims.w;
        let start = self.index(t, z, 0, 0);
        &self.data[start..start + n]
    }

    /// One full z-stack, `Z x H x W`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.dims.z * self.dims.h * self.dims.w;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn max_intensity(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Rescales by the global maximum so the brightest voxel becomes 1.
    /// All-zero volumes are left alone.
    pub fn normalize_global_max(&mut self) {
        let max = self.max_intensity();
        if max > 0.0 {
            for v in &mut self.data {
                *v /= max;
            }
        }
    }
}

/// Writes a raw container: magic, four little-endian u64 dims, then
/// little-endian f32 payload in `(t, z, y, x)` order.
pub fn write_container(path: &Path, dims: [usize; 4], data: &[f32]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::Invalid(format!(
            "container dims {:?} imply {} values, got {}",
            dims,
            expected,
            data.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(RAW_MAGIC)?;
    for d in dims {
        write(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write(&buf)?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a raw container verbatim; no rescaling is applied.
pub fn read_container(path: &Path) -> Result<([usize; 4], Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<([usize; 4], Vec<f32>)> {
    const HEADER: usize = 8 + 4 * 8;
    if bytes.len() < HEADER {
        return Err(Error::Corrupt(format!(
            "file is {} bytes, shorter than the {HEADER}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..8] != RAW_MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let start = 8 + i * 8;
        let raw = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        *d = usize::try_from(raw)
            .map_err(|_| Error::Corrupt(format!("dimension {raw} does not fit in memory")))?;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Corrupt(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[HEADER..];
    if count.checked_mul(4) != Some(payload.len()) {
        return Err(Error::Corrupt(format!(
            "dims {:?} need {} payload bytes, found {}",
            dims,
            count.saturating_mul(4),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn write_raw(volume: &Volume4D, path: &Path) -> Result<()> {
    write_container(path, volume.dims.as_array(), &volume.data)
}

pub fn read_raw(path: &Path) -> Result<Volume4D> {
    let (d, data) = read_container(path)?;
    let dims = Dims4::new(d[0], d[1], d[2], d[3]);
    dims.validate()
        .map_err(|_| Error::Corrupt(format!("zero dimension in header {d:?}")))?;
    Volume4D::new(dims, data)
}

/// Filename pattern for slice stacks, e.g. `frame{t}_slice{z}.tif`.
///
/// `{t}` and `{z}` match zero-padded decimal integers.
#[derive(Debug, Clone)]
pub struct SliceLayout {
    pattern: String,
    regex: Regex,
    t_first: bool,
}

impl SliceLayout {
    pub fn parse(pattern: &str) -> Result<Self> {
        let t_pos = pattern.find("{t}");
        let z_pos = pattern.find("{z}");
        let (t_pos, z_pos) = match (t_pos, z_pos) {
            (Some(t), Some(z)) => (t, z),
            _ => {
                return Err(Error::Config(format!(
                    "slice layout {pattern:?} must contain both {{t}} and {{z}}"
                )))
            }
        };
        let mut re = String::from("^");
        let mut rest = pattern;
        while !rest.is_empty() {
            if let Some(r) = rest
                .strip_prefix("{t}")
                .or_else(|| rest.strip_prefix("{z}"))
            {
                re.push_str(r"(\d+)");
                rest = r;
            } else {
                let next = rest
                    .char_indices()
                    .skip(1)
                    .find(|(i, _)| rest[*i..].starts_with("{t}") || rest[*i..].starts_with("{z}"))
                    .map(|(i, _)| i)
                    .unwrap_or(rest.len());
                re.push_str(&regex::escape(&rest[..next]));
                rest = &rest[next..];
            }
        }
        re.push('$');
        let regex = Regex::new(&re).map_err(|e| Error::Config(e.to_string()))?;
        Ok(SliceLayout {
            pattern: pattern.to_string(),
            regex,
            t_first: t_pos < z_pos,
        })
    }

    /// Returns `(t, z, digits_t, digits_z)` if `name` matches.
    fn matches(&self, name: &str) -> Option<(usize, usize, usize, usize)> {
        let caps = self.regex.captures(name)?;
        let (a, b) = (caps.get(1)?.as_str(), caps.get(2)?.as_str());
        let (ts, zs) = if self.t_first { (a, b) } else { (b, a) };
        Some((ts.parse().ok()?, zs.parse().ok()?, ts.len(), zs.len()))
    }

    pub fn file_name(&self, t: usize, z: usize, t_width: usize, z_width: usize) -> String {
        self.pattern
            .replace("{t}", &format!("{t:0t_width$}"))
            .replace("{z}", &format!("{z:0z_width$}"))
    }
}

/// Loads a volume from a slice directory (with `layout`) or a raw container file.
///
/// Slice images are converted to grayscale by averaging channels and the
/// whole video is rescaled by its global maximum. Raw containers are loaded
/// verbatim.
pub fn load_stack(root: &Path, layout: Option<&str>) -> Result<Volume4D> {
    if root.is_file() {
        return read_raw(root);
    }
    let layout = SliceLayout::parse(layout.ok_or_else(|| {
        Error::Config(format!(
            "{} is a directory; a slice layout is required",
            root.display()
        ))
    })?)?;

    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut found: BTreeMap<(usize, usize), PathBuf> = BTreeMap::new();
    let mut widths = (1, 1);
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some((t, z, wt, wz)) = layout.matches(name) {
            widths = (wt, wz);
            found.insert((t, z), entry.path());
        }
    }
    if found.is_empty() {
        return Err(Error::NoSlices(root.to_path_buf()));
    }
    let t_min = found.keys().map(|k| k.0).min().unwrap();
    let t_max = found.keys().map(|k| k.0).max().unwrap();
    let z_min = found.keys().map(|k| k.1).min().unwrap();
    let z_max = found.keys().map(|k| k.1).max().unwrap();
    for t in t_min..=t_max {
        for z in z_min..=z_max {
            if !found.contains_key(&(t, z)) {
                return Err(Error::MissingSlice {
                    t,
                    z,
                    path: root.join(layout.file_name(t, z, widths.0, widths.1)),
                });
            }
        }
    }

    let n_t = t_max - t_min + 1;
    let n_z = z_max - z_min + 1;
    let mut shape: Option<(usize, usize)> = None;
    let mut data = Vec::new();
    for path in found.values() {
        let (h, w, pixels) = decode_gray(path)?;
        match shape {
            None => {
                shape = Some((h, w));
                data.reserve(n_t * n_z * h * w);
            }
            Some(s) if s != (h, w) => {
                return Err(Error::SliceShape {
                    expected: s,
                    found: (h, w),
                    path: path.clone(),
                })
            }
            _ => {}
        }
        data.extend_from_slice(&pixels);
    }
    let (h, w) = shape.unwrap();
    let mut volume = Volume4D::new(Dims4::new(n_t, n_z, h, w), data)?;
    volume.normalize_global_max();
    Ok(volume)
}

fn decode_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = if img.color().has_color() {
        img.to_rgb32f()
            .pixels()
            .map(|p| (p.0[0] + p.0[1] + p.0[2]) / 3.0)
            .collect()
    } else {
        img.to_luma32f().pixels().map(|p| p.0[0]).collect()
    };
    Ok((h, w, pixels))
}
