//! Directory-based tensor archive: `manifest.json` maps each tensor name to
//! `{file, shape, dtype}`; payloads are raw little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorDtype {
    F16,
    F32,
    F64,
}

impl TensorDtype {
    pub fn size(self) -> usize {
        match self {
            TensorDtype::F16 => 2,
            TensorDtype::F32 => 4,
            TensorDtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: TensorDtype,
}

#[derive(Clone, Debug)]
pub struct TensorArchive {
    root: PathBuf,
    entries: BTreeMap<String, ManifestEntry>,
}

impl TensorArchive {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Ok(TensorArchive { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entry(&self, name: &str) -> Result<&ManifestEntry> {
        self.entries.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn load<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let path = self.root.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let n: usize = e.shape.iter().product();
        let expected = n * e.dtype.size();
        if bytes.len() != expected {
            return Err(Error::PayloadSize {
                path,
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        let data: Vec<T> = match e.dtype {
            TensorDtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| T::lit(f16::from_le_bytes([c[0], c[1]]).to_f64()))
                .collect(),
            TensorDtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            TensorDtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name}[{i}]")));
        }
        Tensor::from_vec(&e.shape, data)
    }

    /// Loads `name` and checks its shape.
    pub fn load_shaped<T: Scalar>(&self, name: &str, want: &[usize]) -> Result<Tensor<T>> {
        let t = self.load(name)?;
        if t.shape() != want {
            return Err(Error::TensorShape {
                name: name.to_string(),
                got: t.shape().to_vec(),
                want: want.to_vec(),
            });
        }
        Ok(t)
    }
}

pub struct ArchiveWriter {
    root: PathBuf,
    entries: BTreeMap<String, ManifestEntry>,
}

impl ArchiveWriter {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(ArchiveWriter {
            root,
            entries: BTreeMap::new(),
        })
    }

    pub fn add<T: Scalar>(&mut self, name: &str, t: &Tensor<T>, dtype: TensorDtype) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate tensor `{name}`")));
        }
        let stem: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        let file = format!("{:05}_{stem}.bin", self.entries.len());
        let mut bytes = Vec::with_capacity(t.len() * dtype.size());
        for &v in t.data() {
            let x = v.to_f64_lossy();
            match dtype {
                TensorDtype::F16 => bytes.extend_from_slice(&f16::from_f64(x).to_le_bytes()),
                TensorDtype::F32 => bytes.extend_from_slice(&(x as f32).to_le_bytes()),
                TensorDtype::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
            }
        }
        let path = self.root.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.insert(
            name.to_string(),
            ManifestEntry {
                file,
                shape: t.shape().to_vec(),
                dtype,
            },
        );
        Ok(())
    }

    pub fn finish(self) -> Result<TensorArchive> {
        let path = self.root.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.entries).map_err(|e| Error::json("manifest", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(TensorArchive {
            root: self.root,
            entries: self.entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 * 0.25 - 1.0);
        let mut w = ArchiveWriter::create(dir.path()).unwrap();
        w.add("a.weight", &t, TensorDtype::F32).unwrap();
        w.add("b/weight", &t, TensorDtype::F16).unwrap();
        w.add("c", &t, TensorDtype::F64).unwrap();
        assert!(w.add("c", &t, TensorDtype::F64).is_err());
        w.finish().unwrap();
        let a = TensorArchive::open(dir.path()).unwrap();
        for n in ["a.weight", "b/weight", "c"] {
            assert_eq!(a.load::<f64>(n).unwrap(), t, "{n}");
        }
        assert!(matches!(a.load::<f32>("nope"), Err(Error::MissingTensor(_))));
        let err = a.load_shaped::<f32>("c", &[4, 3]).unwrap_err();
        assert!(err.to_string().contains("`c`"));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArchiveWriter::create(dir.path()).unwrap();
        w.add("x", &Tensor::<f32>::zeros(&[8]), TensorDtype::F32).unwrap();
        let a = w.finish().unwrap();
        let file = dir.path().join(&a.entry("x").unwrap().file);
        fs::write(&file, [0u8; 10]).unwrap();
        assert!(matches!(a.load::<f32>("x"), Err(Error::PayloadSize { expected: 32, actual: 10, .. })));
    }
}
