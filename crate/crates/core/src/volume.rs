//! Grid types and the `mvol` container: a JSON header next to a raw
//! little-endian payload (`name.json` + `name.raw`).
//!
//! Voxel order is row-major with z slowest; displacement components are
//! stored as (Δz, Δy, Δx) in voxel units of their own grid.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("all dimensions must be >= 1, got {dims:?}")));
    }
    Ok(())
}

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Invalid(format!("spacing must be strictly positive, got {spacing:?}")));
    }
    Ok(())
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}]"))),
        None => Ok(()),
    }
}

/// Scalar intensity grid `(D, H, W)` with physical spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    data: Tensor<T>,
    spacing: Spacing,
}

impl<T: Scalar> Volume<T> {
    pub fn new(data: Tensor<T>, spacing: Spacing) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::Shape(format!("volume must be 3-d, got {:?}", data.shape())));
        }
        check_dims(data.shape())?;
        check_spacing(spacing)?;
        check_finite(&data, "volume data")?;
        Ok(Volume { data, spacing })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let [_, h, w] = dims;
        let t = Tensor::from_fn(&dims, |i| f(i / (h * w), (i / w) % h, i % w));
        Self::new(t, spacing)
    }

    pub fn dims(&self) -> Dims {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn data(&self) -> &[T] {
        self.data.data()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> T {
        let [_, h, w] = self.dims();
        self.data.data()[(z * h + y) * w + x]
    }

    /// `(1, D, H, W)` view used as a single-channel network input.
    pub fn as_channels(&self) -> Tensor<T> {
        let [d, h, w] = self.dims();
        self.data.clone().reshape(&[1, d, h, w]).unwrap()
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            data: self.data.cast(),
            spacing: self.spacing,
        }
    }
}

/// Non-negative integer anatomy labels; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    data: Vec<u32>,
    dims: Dims,
    spacing: Spacing,
    label_set: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u32>) -> Result<Self> {
        check_dims(&dims)?;
        check_spacing(spacing)?;
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!("label map {dims:?} needs {n} voxels, got {}", data.len())));
        }
        let label_set = data.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(LabelMap {
            data,
            dims,
            spacing,
            label_set,
        })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> u32) -> Result<Self> {
        let [d, h, w] = dims;
        let mut data = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Sorted distinct labels present, background included.
    pub fn label_set(&self) -> &[u32] {
        &self.label_set
    }

    pub fn foreground_labels(&self) -> Vec<u32> {
        self.label_set.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u32 {
        let [_, h, w] = self.dims;
        self.data[(z * h + y) * w + x]
    }

    /// `(K, D, H, W)` indicator channels, one per entry of `labels`.
    pub fn one_hot<T: Scalar>(&self, labels: &[u32]) -> Tensor<T> {
        let [d, h, w] = self.dims;
        let n = d * h * w;
        let mut out = Tensor::zeros(&[labels.len(), d, h, w]);
        let buf = out.data_mut();
        for (k, &l) in labels.iter().enumerate() {
            for (i, &v) in self.data.iter().enumerate() {
                if v == l {
                    buf[k * n + i] = T::one();
                }
            }
        }
        out
    }
}

/// Per-voxel displacement `(3, D, H, W)`, components (Δz, Δy, Δx) in voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    data: Tensor<T>,
    spacing: Spacing,
}

impl<T: Scalar> DisplacementField<T> {
    pub fn new(data: Tensor<T>, spacing: Spacing) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::Shape(format!("displacement field must be (3, D, H, W), got {s:?}")));
        }
        check_dims(&s[1..])?;
        check_spacing(spacing)?;
        check_finite(&data, "field data")?;
        Ok(DisplacementField { data, spacing })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        let [d, h, w] = dims;
        DisplacementField {
            data: Tensor::zeros(&[3, d, h, w]),
            spacing,
        }
    }

    /// Builds a field from a closure returning (Δz, Δy, Δx) at each voxel.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> [T; 3]) -> Result<Self> {
        let [d, h, w] = dims;
        let n = d * h * w;
        let mut t = Tensor::zeros(&[3, d, h, w]);
        let buf = t.data_mut();
        let mut i = 0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = f(z, y, x);
                    for c in 0..3 {
                        buf[c * n + i] = v[c];
                    }
                    i += 1;
                }
            }
        }
        Self::new(t, spacing)
    }

    pub fn dims(&self) -> Dims {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    /// Component `c` (0 = z, 1 = y, 2 = x) as a flat slice.
    pub fn component(&self, c: usize) -> &[T] {
        let n: usize = self.dims().iter().product();
        &self.data.data()[c * n..(c + 1) * n]
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> [T; 3] {
        let [_, h, w] = self.dims();
        let i = (z * h + y) * w + x;
        [0, 1, 2].map(|c| self.component(c)[i])
    }

    pub fn cast<U: Scalar>(&self) -> DisplacementField<U> {
        DisplacementField {
            data: self.data.cast(),
            spacing: self.spacing,
        }
    }
}

/// Mean of every 2×2×2 block; spacing doubles.
pub fn downsample_half<T: Scalar>(v: &Volume<T>) -> Result<Volume<T>> {
    let [d, h, w] = v.dims();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("downsample_half needs even dimensions, got {:?}", v.dims())));
    }
    let eighth = T::lit(0.125);
    let out = Volume::from_fn([d / 2, h / 2, w / 2], v.spacing.map(|s| s * 2.0), |z, y, x| {
        let mut s = T::zero();
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    s += v.at(2 * z + dz, 2 * y + dy, 2 * x + dx);
                }
            }
        }
        s * eighth
    })?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// mvol container

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvolHeader {
    pub shape: Dims,
    pub spacing: Spacing,
    pub dtype: Dtype,
    pub components: usize,
}

impl MvolHeader {
    fn elements(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * self.components as u64
    }
}

/// Payload path paired with a header path: same stem, `.raw` extension.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn read_container(path: &Path) -> Result<(MvolHeader, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: MvolHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if header.shape.iter().any(|&d| d == 0) {
        return Err(Error::Header {
            path: path.into(),
            msg: format!("field `shape` has a zero extent: {:?}", header.shape),
        });
    }
    if header.components != 1 && header.components != 3 {
        return Err(Error::Header {
            path: path.into(),
            msg: format!("field `components` must be 1 or 3, got {}", header.components),
        });
    }
    let ppath = payload_path(path);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected = header.elements() * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: ppath,
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok((header, bytes))
}

fn write_container(path: &Path, header: &MvolHeader, payload: &[u8]) -> Result<()> {
    let text = serde_json::to_string_pretty(header).map_err(|e| Error::json("mvol header", e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let ppath = payload_path(path);
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))
}

fn expect(path: &Path, header: &MvolHeader, dtype: Dtype, components: usize) -> Result<()> {
    if header.dtype != dtype {
        return Err(Error::Header {
            path: path.into(),
            msg: format!("field `dtype` is {:?}, expected {:?}", header.dtype, dtype),
        });
    }
    if header.components != components {
        return Err(Error::Header {
            path: path.into(),
            msg: format!("field `components` is {}, expected {components}", header.components),
        });
    }
    check_spacing(header.spacing).map_err(|_| Error::Header {
        path: path.into(),
        msg: format!("field `spacing` must be positive, got {:?}", header.spacing),
    })
}

fn f32_payload(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume<f32>> {
    let path = path.as_ref();
    let (header, bytes) = read_container(path)?;
    expect(path, &header, Dtype::F32, 1)?;
    let t = Tensor::from_vec(&header.shape, f32_payload(&bytes))?;
    Volume::new(t, header.spacing)
}

pub fn save_volume(v: &Volume<f32>, path: impl AsRef<Path>) -> Result<()> {
    check_finite(&v.data, "volume data")?;
    let header = MvolHeader {
        shape: v.dims(),
        spacing: v.spacing,
        dtype: Dtype::F32,
        components: 1,
    };
    write_container(path.as_ref(), &header, &f32_bytes(v.data()))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (header, bytes) = read_container(path)?;
    expect(path, &header, Dtype::I32, 1)?;
    let mut data = Vec::with_capacity(bytes.len() / 4);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if v < 0 {
            return Err(Error::Invalid(format!("negative label {v} at labels[{i}] in {}", path.display())));
        }
        data.push(v as u32);
    }
    LabelMap::new(header.shape, header.spacing, data)
}

pub fn save_labels(s: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let header = MvolHeader {
        shape: s.dims,
        spacing: s.spacing,
        dtype: Dtype::I32,
        components: 1,
    };
    let mut payload = Vec::with_capacity(s.data.len() * 4);
    for &v in &s.data {
        let v = i32::try_from(v).map_err(|_| Error::Invalid(format!("label {v} exceeds i32")))?;
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_container(path.as_ref(), &header, &payload)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField<f32>> {
    let path = path.as_ref();
    let (header, bytes) = read_container(path)?;
    expect(path, &header, Dtype::F32, 3)?;
    let [d, h, w] = header.shape;
    let t = Tensor::from_vec(&[3, d, h, w], f32_payload(&bytes))?;
    DisplacementField::new(t, header.spacing)
}

pub fn save_field(u: &DisplacementField<f32>, path: impl AsRef<Path>) -> Result<()> {
    check_finite(&u.data, "field data")?;
    let header = MvolHeader {
        shape: u.dims(),
        spacing: u.spacing,
        dtype: Dtype::F32,
        components: 3,
    };
    write_container(path.as_ref(), &header, &f32_bytes(u.data.data()))
}
