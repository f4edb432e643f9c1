//! Seeded parameter storage.
//!
//! Parameters are created in construction order from a dedicated rng, so two
//! models built from the same seed are bit-identical. Names are dotted paths
//! (`vfm.stem.weight`); the first segment tags the parameter group.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: StreamRng,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(rng: StreamRng, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng,
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Builder {
        Builder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// All parameters, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters from `values`. Every stored parameter must be present.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars() {
            let value = values
                .get(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if value.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, expected {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies parameters whose names start with `prefix` from another store.
    pub fn copy_group_from(&self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, var) in self.vars() {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = other
                .get(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&name) {
            if v.shape() != &shape {
                return Err(Error::Shape(format!("parameter {name} redeclared with a new shape")));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * inner.rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

#[derive(Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
}

impl Builder {
    pub fn pp(&self, name: impl AsRef<str>) -> Builder {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
