use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

/// Initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
    },
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Constant(f32),
}

/// Named parameter tensors of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let value = match init {
            Init::He { fan_in } => {
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Constant(v) => vec![v; n],
        };
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// sha256 over names, shapes and raw values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Serializes to safetensors bytes with string metadata.
    pub fn to_safetensors(&self, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
        let bytes: Vec<Vec<u8>> = self
            .params
            .iter()
            .map(|p| p.value.iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views = self
            .params
            .iter()
            .zip(&bytes)
            .map(|(p, b)| {
                TensorView::new(Dtype::F32, p.shape.clone(), b)
                    .map(|v| (p.name.clone(), v))
                    .map_err(|e| Error::Format(format!("tensor {}: {e}", p.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Format(format!("safetensors: {e}")))
    }

    /// Overwrites every parameter from safetensors bytes; names and shapes must match.
    /// Returns the file's metadata.
    pub fn load_safetensors(&mut self, bytes: &[u8]) -> Result<BTreeMap<String, String>> {
        let fmt = |e: safetensors::SafeTensorError| Error::Format(format!("safetensors: {e}"));
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(fmt)?;
        let tensors = SafeTensors::deserialize(bytes).map_err(fmt)?;
        if tensors.names().len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, network expects {}",
                tensors.names().len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let view = tensors
                .tensor(&p.name)
                .map_err(|_| Error::Format(format!("checkpoint lacks tensor {}", p.name)))?;
            if view.dtype() != Dtype::F32 || view.shape() != p.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {}: expected f32 {:?}, found {:?} {:?}",
                    p.name,
                    p.shape,
                    view.dtype(),
                    view.shape()
                )));
            }
            p.value = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
        }
        Ok(meta.metadata().clone().unwrap_or_default().into_iter().collect())
    }
}

/// Reads only the metadata of a safetensors file.
pub fn safetensors_metadata(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Format(format!("safetensors: {e}")))?;
    Ok(meta.metadata().clone().unwrap_or_default().into_iter().collect())
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Grads {
        Grads {
            data: store.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.data[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.data[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.data {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f32 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f32) -> f32 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}
