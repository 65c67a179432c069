//! Named parameter storage, initialization and the three-way parameter
//! partition used by the multi-task optimizers.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Parameter groups of the multi-task model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Shared feature encoder (W_sh).
    Shared,
    /// Global reasoning units and segmentation decoders (W_seg).
    Segmentation,
    /// Graph attention interaction head (W_sg).
    SceneGraph,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Shared, Group::Segmentation, Group::SceneGraph];

    /// Group owning a parameter, decided by its namespace.
    pub fn of(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        match head {
            "encoder" => Some(Group::Shared),
            "glore" | "seg" => Some(Group::Segmentation),
            "sg" => Some(Group::SceneGraph),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Updated by the optimizer.
    Trainable,
    /// Model state that is saved and hashed but never receives gradients
    /// (normalization running statistics, frozen embedding tables).
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    kind: Kind,
    group: Group,
}

/// Every tensor of a model, addressed by dotted name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    entries: BTreeMap<String, Entry>,
    frozen: [bool; 3],
}

/// Names of the parameters in each group plus the group freeze flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelPartition {
    pub w_sh: Vec<String>,
    pub w_seg: Vec<String>,
    pub w_sg: Vec<String>,
    pub frozen: BTreeMap<Group, bool>,
}

impl ModelPartition {
    pub fn group(&self, g: Group) -> &[String] {
        match g {
            Group::Shared => &self.w_sh,
            Group::Segmentation => &self.w_seg,
            Group::SceneGraph => &self.w_sg,
        }
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            entries: BTreeMap::new(),
            frozen: [false; 3],
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, kind: Kind) -> Result<Var> {
        let group = Group::of(name).ok_or_else(|| {
            Error::invalid(format!(
                "parameter `{name}` is outside every group namespace"
            ))
        })?;
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.contiguous()?)?;
        self.entries.insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                kind,
                group,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn kind(&self, name: &str) -> Option<Kind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// All entries, trainable and buffers, in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.var))
    }

    /// Trainable entries whose group is not frozen.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == Kind::Trainable && !self.frozen[e.group.index()])
            .map(|(k, e)| (k.as_str(), &e.var))
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        self.frozen[group.index()] = frozen;
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen[group.index()]
    }

    pub fn partition(&self) -> ModelPartition {
        let mut p = ModelPartition {
            w_sh: vec![],
            w_seg: vec![],
            w_sg: vec![],
            frozen: Group::ALL
                .iter()
                .map(|g| (*g, self.is_frozen(*g)))
                .collect(),
        };
        for (name, e) in &self.entries {
            if e.kind != Kind::Trainable {
                continue;
            }
            match e.group {
                Group::Shared => p.w_sh.push(name.clone()),
                Group::Segmentation => p.w_seg.push(name.clone()),
                Group::SceneGraph => p.w_sg.push(name.clone()),
            }
        }
        p
    }

    /// SHA-256 over names, shapes and raw values of every entry (buffers
    /// included) in the given groups.
    pub fn hash_groups(&self, groups: &[Group]) -> Result<String> {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            if !groups.contains(&e.group) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in e.var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(tensor_bytes(e.var.as_tensor())?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Little-endian bytes of a floating point tensor.
pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::invalid(format!("unsupported dtype {other:?}"))),
    })
}

/// Scoped parameter creation with a deterministic random source.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Init<'_> {
        Init {
            prefix: self.path(&name.to_string()),
            store: self.store,
            rng: self.rng,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn put(&mut self, name: &str, value: Tensor, kind: Kind) -> Result<Tensor> {
        let path = self.path(name);
        Ok(self.store.insert(&path, value, kind)?.as_tensor().clone())
    }

    pub fn put_var(&mut self, name: &str, value: Tensor, kind: Kind) -> Result<Var> {
        let path = self.path(name);
        self.store.insert(&path, value, kind)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.put(name, t, Kind::Trainable)
    }

    /// He-normal initialization for rectifier layers.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan: usize) -> Result<Tensor> {
        self.normal(name, shape, (2.0 / fan as f64).sqrt())
    }

    /// Uniform in ±1/√fan_in, the usual default for affine layers.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist =
            Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.sample(dist)).collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.put(name, t, Kind::Trainable)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, DType::F64, &Device::Cpu)?;
        self.put(name, t, Kind::Trainable)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::ones(shape, DType::F64, &Device::Cpu)?;
        self.put(name, t, Kind::Trainable)
    }
}
