//! Named parameter storage shared by the backbone, heads and prototypes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered map of named variables. Ordering keeps checksums and
/// checkpoint layouts stable across runs.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(DType::F32)?)?;
        self.vars.insert(name.into(), var);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    /// The parameter as a graph node; frozen parameters are detached so no
    /// gradient can reach them.
    pub fn tensor(&self, name: &str, trainable: bool) -> Result<Tensor> {
        let var = self.var(name)?;
        Ok(if trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Deep copy: the returned store owns fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(&self.device);
        for (k, v) in &self.vars {
            out.vars
                .insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Overwrites values from `other` for every shared name, shape-checked.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (k, v) in &self.vars {
            let src = other.var(k)?;
            if src.shape() != v.shape() {
                return Err(Error::config(format!(
                    "shape mismatch for `{k}`: {:?} vs {:?}",
                    src.shape(),
                    v.shape()
                )));
            }
            v.set(src.as_tensor())?;
        }
        Ok(())
    }

    pub fn to_map(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_map(""), path)?;
        Ok(())
    }

    /// Loads every known parameter from `tensors[prefix + name]`. Unknown
    /// keys in the file are ignored; missing keys are an error.
    pub fn load_map(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (k, v) in &self.vars {
            let key = format!("{prefix}{k}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::config(format!("checkpoint lacks `{key}`")))?;
            let t = t.to_dtype(DType::F32)?.to_device(&self.device)?;
            if t.shape() != v.shape() {
                return Err(Error::config(format!(
                    "checkpoint shape mismatch for `{key}`: file {:?}, model {:?}",
                    t.shape(),
                    v.shape()
                )));
            }
            v.set(&t)?;
        }
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.load_map(&tensors, "")
    }

    /// SHA-256 over names and raw values of the selected parameters.
    pub fn checksum(&self, keep: impl Fn(&str) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in self.vars.iter().filter(|(k, _)| keep(k)) {
            h.update(k.as_bytes());
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().sum_all()?.to_scalar::<f32>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Seeded parameter initializers.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub device: &'a Device,
}

impl Init<'_> {
    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let data: Vec<f32> = (0..n)
            .map(|_| loop {
                let z: f64 = dist.sample(self.rng);
                if z.abs() <= 2.0 {
                    break (z * std) as f32;
                }
            })
            .collect();
        Ok(Tensor::from_vec(data, shape, self.device)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        Ok(Tensor::from_vec(data, shape, self.device)?)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        Ok(Tensor::from_vec(data, shape, self.device)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, DType::F32, self.device)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape, DType::F32, self.device)?)
    }
}
