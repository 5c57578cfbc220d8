//! Named parameter storage shared by the generator, encoder and backbone.
//!
//! Parameters are created through a [`ParamStore`] by name. A fresh store
//! draws initial values from a seeded ChaCha stream in creation order, so two
//! builds from the same seed are bit-identical. A store loaded from disk hands
//! back the stored arrays instead and refuses names it does not know.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{contract, DseError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Const(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Fresh,
    Loaded,
}

pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    trainable: bool,
    mode: Mode,
}

impl ParamStore {
    /// Fresh store; values drawn from `seed` in creation order.
    pub fn seeded(seed: u64, dtype: DType, trainable: bool) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
            trainable,
            mode: Mode::Fresh,
        }
    }

    /// Store backed by a safetensors file. Keys prefixed `buffer.` are
    /// non-trainable state (running statistics); all others are parameters.
    pub fn load(path: &Path, dtype: DType, trainable: bool) -> Result<Self> {
        if !path.exists() {
            return Err(DseError::io(path, "file not found"));
        }
        let tensors =
            candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| DseError::io(path, e))?;
        let mut store = Self::seeded(0, dtype, trainable);
        store.mode = Mode::Loaded;
        for (name, t) in tensors {
            let var = Var::from_tensor(&t.to_dtype(dtype)?)?;
            match name.strip_prefix("buffer.") {
                Some(rest) => store.buffers.insert(rest.to_string(), var),
                None => store.params.insert(name, var),
            };
        }
        Ok(store)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn sample(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut self.rng);
                    v * std
                })
                .collect(),
            Init::Const(c) => vec![c; n],
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn fetch(
        &mut self,
        buffer: bool,
        name: &str,
        shape: &[usize],
        init: Init,
    ) -> Result<Var> {
        let mode = self.mode;
        let existing = if buffer {
            self.buffers.get(name)
        } else {
            self.params.get(name)
        };
        if let Some(var) = existing {
            if var.dims() != shape {
                return Err(contract!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    var.dims()
                ));
            }
            return Ok(var.clone());
        }
        if mode == Mode::Loaded {
            return Err(DseError::Config(format!(
                "checkpoint has no parameter named `{name}`"
            )));
        }
        let var = Var::from_tensor(&self.sample(shape, init)?)?;
        if buffer {
            self.buffers.insert(name.to_string(), var.clone());
        } else {
            self.params.insert(name.to_string(), var.clone());
        }
        Ok(var)
    }

    /// Parameter tensor. Frozen stores hand out detached copies so that no
    /// gradient is ever accumulated for them.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = self.fetch(false, name, shape, init)?;
        Ok(if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }

    /// Mutable non-trainable state such as running statistics.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.fetch(true, name, shape, init)
    }

    /// Trainable parameters in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        if self.trainable {
            self.params.values().cloned().collect()
        } else {
            Vec::new()
        }
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over every parameter and buffer, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        let all = self
            .params
            .iter()
            .chain(self.buffers.iter().map(|(k, v)| (k, v)));
        for (name, var) in all {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Independent copy: new storage for every value, same names.
    pub fn deep_copy(&self, trainable: bool) -> Result<Self> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(Self {
            params: copy(&self.params)?,
            buffers: copy(&self.buffers)?,
            rng: self.rng.clone(),
            dtype: self.dtype,
            device: self.device.clone(),
            trainable,
            mode: Mode::Loaded,
        })
    }

    /// Same values, rebuilt in another dtype.
    pub fn to_dtype(&self, dtype: DType, trainable: bool) -> Result<Self> {
        let conv = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?)))
                .collect()
        };
        Ok(Self {
            params: conv(&self.params)?,
            buffers: conv(&self.buffers)?,
            rng: self.rng.clone(),
            dtype,
            device: self.device.clone(),
            trainable,
            mode: Mode::Loaded,
        })
    }

    /// Replace one parameter's value in place (test fixtures, conversions).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| contract!("no parameter named `{name}`"))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Write all values as one safetensors file (buffers under `buffer.`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (k, v) in &self.params {
            map.insert(k.clone(), v.as_tensor().to_dtype(DType::F32)?);
        }
        for (k, v) in &self.buffers {
            map.insert(format!("buffer.{k}"), v.as_tensor().to_dtype(DType::F32)?);
        }
        candle_core::safetensors::save(&map, path).map_err(|e| DseError::io(path, e))
    }
}
