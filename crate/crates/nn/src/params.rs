use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Layers hold [`ParamId`]s; the numbers live here
/// so the same architecture can be evaluated in `f32` or `f64`.
#[derive(Debug, Clone)]
pub struct Params<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    trainable: Vec<bool>,
    by_name: HashMap<String, usize>,
}

impl<S: Float> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Float> Params<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(true);
        ParamId(self.names.len() - 1)
    }

    /// Normal init with standard deviation `std`.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, S::one()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|i| ParamId(*i))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = false;
            }
        }
    }

    pub fn cast<T: Float>(&self) -> Params<T> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

const MAGIC: &[u8; 4] = b"DTCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint field is not valid UTF-8")]
    Utf8,
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("parameter {name}: shape {found:?} in checkpoint, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Serialises `metadata` (free-form UTF-8, usually JSON) and every tensor as
/// name, shape and little-endian `f32` data.
///
/// Layout: `"DTCK" u32:version u32:meta_len meta u32:count` then per tensor
/// `u32:name_len name u32:ndim u32*ndim f32*numel`.
pub fn write_checkpoint<W: Write, S: Float>(w: &mut W, metadata: &str, tensors: &[(&str, &Tensor<S>)]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(metadata.len() as u32)?;
    w.write_all(metadata.as_bytes())?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for d in t.shape() {
            w.write_u32::<LittleEndian>(*d as u32)?;
        }
        for v in t.data() {
            w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    Ok(())
}

pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>, CheckpointError> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        Ok(self.tensors.swap_remove(i).1)
    }

    /// Overwrites every parameter in `params` from the checkpoint.
    pub fn load_into(&mut self, params: &mut Params<f32>) -> Result<(), CheckpointError> {
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let t = self.take(&name)?;
            if t.shape() != params.get(id).shape() {
                return Err(CheckpointError::Shape {
                    name,
                    found: t.shape().to_vec(),
                    expected: params.get(id).shape().to_vec(),
                });
            }
            *params.get_mut(id) = t;
        }
        Ok(())
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let metadata = read_string(r)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(r)?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        tensors.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(Checkpoint { metadata, tensors })
}

fn read_string<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Utf8)
}

/// Writes every parameter of `params` under its own name.
pub fn write_params<W: Write>(w: &mut W, metadata: &str, params: &Params<f32>, extra: &[(&str, &Tensor<f32>)]) -> Result<(), CheckpointError> {
    let mut all: Vec<(&str, &Tensor<f32>)> = params.ids().map(|id| (params.name(id), params.get(id))).collect();
    all.extend_from_slice(extra);
    write_checkpoint(w, metadata, &all)
}
