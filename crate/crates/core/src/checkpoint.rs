//! Named-array checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GMTLCKPT"            8-byte magic
//! u32                    format version (1)
//! u64                    manifest length in bytes
//! manifest               UTF-8 JSON, see `Manifest`
//! payload                concatenated array bytes, offsets relative to payload start
//! ```
//!
//! Every array carries its dtype, shape, byte range and a SHA-256 of its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::params::{tensor_bytes, ParamStore};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GMTLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayDType {
    F32,
    F64,
}

impl ArrayDType {
    fn size(self) -> usize {
        match self {
            ArrayDType::F32 => 4,
            ArrayDType::F64 => 8,
        }
    }

    fn of(dt: DType) -> Result<Self> {
        match dt {
            DType::F32 => Ok(ArrayDType::F32),
            DType::F64 => Ok(ArrayDType::F64),
            other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: ArrayDType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dtype: ArrayDType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl NamedArray {
    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            dtype: ArrayDType::of(t.dtype())?,
            shape: t.dims().to_vec(),
            bytes: tensor_bytes(t)?,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = match self.dtype {
            ArrayDType::F32 => {
                let v: Vec<f32> = self
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &Device::Cpu)?
            }
            ArrayDType::F64 => {
                let v: Vec<f64> = self
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &Device::Cpu)?
            }
        };
        Ok(t.to_dtype(dtype)?)
    }
}

/// In-memory checkpoint: free-form string metadata plus named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::Checkpoint(format!("duplicate array `{name}`")));
        }
        self.arrays.push(NamedArray::from_tensor(name, t)?);
        Ok(())
    }

    /// Adds every entry of a parameter store under its own name.
    pub fn push_store(&mut self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            self.push_tensor(name, var.as_tensor())?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for a in &self.arrays {
            entries.push(ManifestEntry {
                name: a.name.clone(),
                dtype: a.dtype,
                shape: a.shape.clone(),
                offset,
                nbytes: a.bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&a.bytes)),
            });
            offset += a.bytes.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let tmp = path.with_extension("partial");
        let write = || -> std::io::Result<()> {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes())?;
            f.write_all(&(manifest.len() as u64).to_le_bytes())?;
            f.write_all(&manifest)?;
            for a in &self.arrays {
                f.write_all(&a.bytes)?;
            }
            f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&raw)
    }

    pub fn decode(raw: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if raw.len() < 20 || &raw[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mlen = u64::from_le_bytes(raw[12..20].try_into().expect("8 bytes")) as usize;
        let body = raw
            .get(20..20 + mlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let payload = &raw[20 + mlen..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            let start = e.offset as usize;
            let bytes = payload
                .get(start..start + e.nbytes as usize)
                .ok_or_else(|| Error::Checkpoint(format!("array `{}` is truncated", e.name)))?;
            let expect: usize = e.shape.iter().product::<usize>() * e.dtype.size();
            if expect != bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "array `{}` declares shape {:?} but holds {} bytes",
                    e.name,
                    e.shape,
                    bytes.len()
                )));
            }
            if hex::encode(Sha256::digest(bytes)) != e.sha256 {
                return Err(Error::Checkpoint(format!(
                    "checksum mismatch for array `{}`",
                    e.name
                )));
            }
            arrays.push(NamedArray {
                name: e.name,
                dtype: e.dtype,
                shape: e.shape,
                bytes: bytes.to_vec(),
            });
        }
        Ok(Self {
            meta: manifest.meta,
            arrays,
        })
    }

    /// Copies arrays into the store. Every store entry must be present with a
    /// matching shape unless `prefix` restricts the copy to one namespace;
    /// all problems are reported together.
    pub fn restore_into(&self, store: &ParamStore, prefix: Option<&str>) -> Result<()> {
        let selected = |name: &str| prefix.is_none_or(|p| name.starts_with(p));
        let mut problems = Vec::new();
        for (name, var) in store.iter().filter(|(n, _)| selected(n)) {
            match self.get(name) {
                None => problems.push(format!("missing parameter `{name}`")),
                Some(a) if a.shape != var.dims() => problems.push(format!(
                    "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                    a.shape,
                    var.dims()
                )),
                Some(_) => {}
            }
        }
        for a in self.arrays.iter().filter(|a| selected(&a.name)) {
            if store.get(&a.name).is_none() && !a.name.starts_with("optim.") {
                problems.push(format!("unexpected parameter `{}`", a.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        for (name, var) in store.iter().filter(|(n, _)| selected(n)) {
            let a = self.get(name).expect("checked above");
            var.set(&a.to_tensor(store.dtype())?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::Init;

    fn store() -> ParamStore {
        let mut s = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut init = Init::new(&mut s, &mut rng, "encoder");
        init.kaiming("conv.weight", &[4, 3, 3, 3], 27).unwrap();
        init.zeros("conv.bias", &[4]).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_identical() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let s = store();
        let mut ck = Checkpoint::new();
        ck.meta.insert("stage".into(), "A".into());
        ck.push_store(&s)?;
        ck.save(&path)?;
        let back = Checkpoint::load(&path)?;
        assert_eq!(back, ck);
        Ok(())
    }

    #[test]
    fn corrupted_payload_fails_checksum() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut ck = Checkpoint::new();
        ck.push_store(&store())?;
        ck.save(&path)?;
        let mut raw = fs::read(&path).unwrap();
        let last = raw.len() - 1;
        raw[last] ^= 0x40;
        let err = Checkpoint::decode(&raw).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "{err}");
        Ok(())
    }

    #[test]
    fn restore_reports_each_bad_parameter() -> Result<()> {
        let s = store();
        let mut ck = Checkpoint::new();
        ck.push_tensor(
            "encoder.conv.weight",
            &Tensor::zeros((4, 3, 5, 5), DType::F32, &Device::Cpu)?,
        )?;
        let err = ck.restore_into(&s, None).unwrap_err().to_string();
        assert!(
            err.contains("shape mismatch for `encoder.conv.weight`"),
            "{err}"
        );
        assert!(
            err.contains("missing parameter `encoder.conv.bias`"),
            "{err}"
        );
        Ok(())
    }
}
