//! Named parameter storage with seed-deterministic initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Trainable parameters plus non-trainable buffers (normalization running
/// statistics), both keyed by dotted path.
///
/// Initial values depend only on `(seed, name)`, never on creation order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of every parameter and buffer, detached from the graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites values from a snapshot; every stored name must be present
    /// with a matching shape.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?)?;
        }
        Ok(())
    }

    fn create(&mut self, name: String, shape: Shape, init: Init, buffer: bool) -> Result<Var> {
        let map = if buffer { &self.buffers } else { &self.params };
        if map.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, &name));
                let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        if buffer {
            self.buffers.insert(name, var.clone());
        } else {
            self.params.insert(name, var.clone());
        }
        Ok(var)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal { std: f64 },
}

/// Scoped view used by layer constructors: `pb.pp("enc1").conv(...)`.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        let full = self.full_name(name);
        self.store.create(full, shape.into(), init, false)
    }

    pub fn buffer<S: Into<Shape>>(&mut self, name: &str, shape: S, value: f64) -> Result<Var> {
        let full = self.full_name(name);
        self.store.create(full, shape.into(), Init::Const(value), true)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}
