//! Seeded parameter store.
//!
//! candle's CPU random generator cannot be seeded, so parameters are drawn from
//! a ChaCha stream here and registered in a [`VarMap`] by dotted name.

use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal { std: f64 },
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

struct Shared {
    varmap: VarMap,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

/// Hierarchical view onto a [`VarMap`]; `pp` pushes a name segment.
#[derive(Clone)]
pub struct Params {
    shared: Arc<Shared>,
    prefix: String,
}

impl Params {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::with_varmap(VarMap::new(), seed, dtype, device)
    }

    pub fn with_varmap(varmap: VarMap, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            shared: Arc::new(Shared {
                varmap,
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
                dtype,
                device: device.clone(),
            }),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            shared: self.shared.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.shared.dtype
    }

    pub fn device(&self) -> &Device {
        &self.shared.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.shared.varmap
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Fetch a parameter, registering `value` under `name` if it does not exist yet.
    pub fn get_or_insert(&self, name: &str, value: &Tensor) -> Result<Tensor> {
        let full = self.full_name(name);
        let data = self.shared.varmap.data();
        let mut vars = data.lock().unwrap();
        if let Some(var) = vars.get(&full) {
            if var.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "parameter {full}: expected {:?}, found {:?}",
                    value.shape(),
                    var.shape()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let var = Var::from_tensor(&value.to_dtype(self.shared.dtype)?)?;
        let out = var.as_tensor().clone();
        vars.insert(full, var);
        Ok(out)
    }

    /// Fetch a parameter, creating it with `init` on first use.
    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.full_name(name);
        let data = self.shared.varmap.data();
        let mut vars = data.lock().unwrap();
        if let Some(var) = vars.get(&full) {
            if var.shape() != &shape {
                return Err(Error::shape(format!(
                    "parameter {full}: expected {shape:?}, found {:?}",
                    var.shape()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let numel = shape.elem_count();
        let values: Vec<f64> = {
            let mut rng = self.shared.rng.lock().unwrap();
            match init {
                Init::Const(c) => vec![c; numel],
                Init::Normal { std } => (0..numel)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..numel).map(|_| rng.random_range(-bound..=bound)).collect()
                }
            }
        };
        let t = Tensor::from_vec(values, shape, &self.shared.device)?.to_dtype(self.shared.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(full, var);
        Ok(out)
    }
}

/// Sorted `(name, var)` pairs whose name starts with `prefix`.
pub fn vars_with_prefix(varmap: &VarMap, prefix: &str) -> Vec<(String, Var)> {
    let data = varmap.data().lock().unwrap();
    let mut out: Vec<(String, Var)> = data
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Standard-normal tensor drawn from a caller-owned generator.
pub fn randn<R: Rng>(rng: &mut R, shape: impl Into<Shape>, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let v: Vec<f64> = (0..shape.elem_count())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}
