//! Raw volume files with a JSON sidecar.
//!
//! `name.raw` holds little-endian voxels in x-fastest order (`f32` images,
//! `u8` labels); `name.json` holds `{dims: [X, Y, Z], spacing: [sx, sy, sz],
//! dtype, kind}`. In memory, extents and spacing are kept as `[Z, Y, X]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub kind: VolumeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<u8>,
}

fn check(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.iter().product::<usize>() != len {
        return Err(Error::InvalidShape(format!("dims {dims:?} do not match {len} voxels")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check(dims, spacing, data.len())?;
        Ok(Volume { dims, spacing, data })
    }

    /// `[1, Z, Y, X]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [z, y, x] = self.dims;
        Tensor::new(vec![1, z, y, x], self.data.iter().map(|&v| T::c(v as f64)).collect()).expect("dims checked")
    }

    /// `[1, Z, Y, X]` tensor of the volume shifted to zero mean and scaled to
    /// unit variance (a constant volume maps to zeros).
    pub fn normalized<T: Scalar>(&self) -> Tensor<T> {
        let n = self.data.len().max(1) as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        let [z, y, x] = self.dims;
        let data = self.data.iter().map(|&v| T::c((v as f64 - mean) * inv)).collect();
        Tensor::new(vec![1, z, y, x], data).expect("dims checked")
    }

    pub fn write(&self, base: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_pair(base.as_ref(), self.dims, self.spacing, "f32", VolumeKind::Image, &bytes)
    }

    pub fn read(base: impl AsRef<Path>) -> Result<Self> {
        let (side, bytes) = read_pair(base.as_ref(), "f32", VolumeKind::Image)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Volume::new(zyx(side.dims), zyx(side.spacing), data)
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check(dims, spacing, data.len())?;
        Ok(LabelVolume { dims, spacing, data })
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn write(&self, base: impl AsRef<Path>) -> Result<()> {
        write_pair(base.as_ref(), self.dims, self.spacing, "u8", VolumeKind::Labels, &self.data)
    }

    pub fn read(base: impl AsRef<Path>) -> Result<Self> {
        let (side, bytes) = read_pair(base.as_ref(), "u8", VolumeKind::Labels)?;
        LabelVolume::new(zyx(side.dims), zyx(side.spacing), bytes)
    }
}

/// Reverses an axis triple between `[X, Y, Z]` and `[Z, Y, X]`.
pub fn zyx<V: Copy>(a: [V; 3]) -> [V; 3] {
    [a[2], a[1], a[0]]
}

/// `base` with any `.raw` / `.json` extension replaced by `ext`.
pub fn companion(base: &Path, ext: &str) -> PathBuf {
    match base.extension().and_then(|e| e.to_str()) {
        Some("raw") | Some("json") => base.with_extension(ext),
        _ => {
            let mut s = base.as_os_str().to_owned();
            s.push(".");
            s.push(ext);
            PathBuf::from(s)
        }
    }
}

fn write_pair(
    base: &Path,
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: &str,
    kind: VolumeKind,
    raw: &[u8],
) -> Result<()> {
    let side = Sidecar { dims: zyx(dims), spacing: zyx(spacing), dtype: dtype.into(), kind };
    fs::write(companion(base, "raw"), raw)?;
    fs::write(companion(base, "json"), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

fn read_pair(base: &Path, dtype: &str, kind: VolumeKind) -> Result<(Sidecar, Vec<u8>)> {
    let json = companion(base, "json");
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(&json)?)?;
    if side.dtype != dtype || side.kind != kind {
        return Err(Error::Format(format!(
            "{}: expected {dtype} {kind:?}, found {} {:?}",
            json.display(),
            side.dtype,
            side.kind
        )));
    }
    let bytes = fs::read(companion(base, "raw"))?;
    let width = if dtype == "u8" { 1 } else { 4 };
    let expect = side.dims.iter().product::<usize>() * width;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: {} bytes, sidecar dims {:?} need {expect}",
            companion(base, "raw").display(),
            bytes.len(),
            side.dims
        )));
    }
    Ok((side, bytes))
}

/// Image/label pair loaded from `<dir>/<name>_image` and `<dir>/<name>_label`.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub image: Volume,
    pub label: LabelVolume,
}

impl Case {
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.image.write(dir.join(format!("{}_image", self.name)))?;
        self.label.write(dir.join(format!("{}_label", self.name)))
    }
}

/// All cases in `dir`, sorted by name.
pub fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_image.json")).map(String::from))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no *_image.json cases in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let image = Volume::read(dir.join(format!("{name}_image")))?;
            let label = LabelVolume::read(dir.join(format!("{name}_label")))?;
            if image.dims != label.dims {
                return Err(Error::shape("case", &image.dims, &label.dims));
            }
            Ok(Case { name, image, label })
        })
        .collect()
}
