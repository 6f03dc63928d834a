//! Named, seeded parameter storage shared by every network.
//!
//! A [`ParamSet`] owns the trainable variables of one sub-network. Layers hold
//! [`Param`] handles into it. Freezing the set makes every handle hand out
//! detached tensors, so the frozen network takes no part in backpropagation
//! and its values cannot move.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Uniform with bound `1/sqrt(fan_in)`.
    FanIn(usize),
    /// Identity for square 2-D weights, zeros elsewhere.
    Identity,
    /// He uniform for a layer followed by LeakyReLU with the given slope:
    /// bound `sqrt(6 / ((1 + slope²)·fan_in))`.
    He {
        fan_in: usize,
        slope: f64,
    },
}

/// `(name, shape, row-major data)`.
pub type NamedBuffer = (String, Vec<usize>, Vec<f32>);

#[derive(Clone)]
pub struct Param {
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    /// The value used in a forward pass; detached while the owning set is frozen.
    pub fn tensor(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_tensor().detach()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param{:?}", self.var.shape())
    }
}

#[derive(Default)]
struct Entries {
    names: Vec<String>,
    vars: Vec<Var>,
}

/// An ordered collection of named variables with a shared freeze switch.
#[derive(Clone)]
pub struct ParamSet {
    entries: Arc<Mutex<Entries>>,
    frozen: Arc<AtomicBool>,
    dtype: DType,
    seed: u64,
}

impl ParamSet {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            entries: Arc::default(),
            frozen: Arc::new(AtomicBool::new(false)),
            dtype,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn builder(&self) -> ParamBuilder {
        ParamBuilder {
            set: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.store(frozen, Ordering::Relaxed);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(name, var)` pairs in registration order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let e = self.entries.lock().unwrap();
        e.names.iter().cloned().zip(e.vars.iter().cloned()).collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.lock().unwrap().vars.clone()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let e = self.entries.lock().unwrap();
        e.names.iter().position(|n| n == name).map(|i| e.vars[i].clone())
    }

    pub fn num_elements(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    /// FNV-1a over the raw bits of every value, in registration order.
    pub fn checksum(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.vars() {
            let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for x in flat.to_vec1::<f64>()? {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        Ok(h)
    }

    /// Copies values out as `f32` row-major buffers.
    pub fn export(&self) -> Result<Vec<NamedBuffer>> {
        self.named_vars()
            .into_iter()
            .map(|(n, v)| {
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((n, v.dims().to_vec(), data))
            })
            .collect()
    }

    /// Overwrites a named parameter; shape must match exactly.
    pub fn load(&self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::CorruptBlob(format!("unknown parameter {name}")))?;
        if var.dims() != shape {
            return Err(Error::shape(format!(
                "parameter {name}: stored {shape:?}, model {:?}",
                var.dims()
            )));
        }
        let t = Tensor::from_slice(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    fn register(&self, name: String, shape: &[usize], init: Init) -> Result<Param> {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Uniform(bound) => self.uniform(&name, numel, bound),
            Init::FanIn(fan_in) => self.uniform(&name, numel, 1.0 / (fan_in.max(1) as f64).sqrt()),
            Init::He { fan_in, slope } => {
                let bound = (6.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt();
                self.uniform(&name, numel, bound)
            }
            Init::Identity => {
                let mut v = vec![0.0; numel];
                if let [r, c] = shape {
                    for i in 0..(*r).min(*c) {
                        v[i * c + i] = 1.0;
                    }
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut e = self.entries.lock().unwrap();
        if e.names.contains(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        e.names.push(name);
        e.vars.push(var.clone());
        Ok(Param {
            var,
            frozen: self.frozen.clone(),
        })
    }

    /// Each parameter draws from its own stream keyed by its name, so adding a
    /// layer never shifts the initialization of the others.
    fn uniform(&self, name: &str, numel: usize, bound: f64) -> Vec<f64> {
        let mut key = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for b in name.bytes() {
            key = (key ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        // Values are drawn in f32 so that f32 and f64 builds start identical.
        (0..numel)
            .map(|_| rng.random_range(-bound..=bound) as f32 as f64)
            .collect()
    }
}

/// Registers parameters under a hierarchical dotted prefix.
#[derive(Clone)]
pub struct ParamBuilder {
    set: ParamSet,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            set: self.set.clone(),
            prefix,
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.set.register(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.set.dtype
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let a = ParamSet::new(DType::F32, 7);
        let b = ParamSet::new(DType::F32, 7);
        a.builder().param("x", &[3], Init::Uniform(1.0)).unwrap();
        let pa = a.builder().param("y", &[4], Init::Uniform(1.0)).unwrap();
        let pb = b.builder().param("y", &[4], Init::Uniform(1.0)).unwrap();
        let va = pa.tensor().to_vec1::<f32>().unwrap();
        let vb = pb.tensor().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn f32_and_f64_start_identical() {
        let a = ParamSet::new(DType::F32, 3);
        let b = ParamSet::new(DType::F64, 3);
        let pa = a.builder().pp("l").param("w", &[5], Init::FanIn(4)).unwrap();
        let pb = b.builder().pp("l").param("w", &[5], Init::FanIn(4)).unwrap();
        let va: Vec<f64> = pa.tensor().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
        assert_eq!(va, pb.tensor().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn frozen_params_are_detached() {
        let set = ParamSet::new(DType::F32, 0);
        let p = set.builder().param("w", &[2], Init::Ones).unwrap();
        assert!(p.tensor().is_variable());
        set.set_frozen(true);
        assert!(!p.tensor().is_variable());
    }

    #[test]
    fn duplicate_names_rejected() {
        let set = ParamSet::new(DType::F32, 0);
        set.builder().param("w", &[2], Init::Ones).unwrap();
        assert!(set.builder().param("w", &[2], Init::Ones).is_err());
    }

    #[test]
    fn export_load_round_trip() {
        let set = ParamSet::new(DType::F32, 11);
        set.builder().param("w", &[2, 3], Init::Uniform(0.5)).unwrap();
        let before = set.checksum().unwrap();
        let exported = set.export().unwrap();
        let other = ParamSet::new(DType::F32, 99);
        other.builder().param("w", &[2, 3], Init::Zeros).unwrap();
        for (n, s, d) in &exported {
            other.load(n, s, d).unwrap();
        }
        assert_eq!(other.checksum().unwrap(), before);
        assert!(other.load("w", &[3, 2], &exported[0].2).is_err());
    }
}
