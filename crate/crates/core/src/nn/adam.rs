use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};

use super::params::{NamedBuffer, ParamSet};
use crate::error::{Error, Result};

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Adam over one [`ParamSet`], with optional global-norm gradient clipping.
pub struct Adam {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Result<Self> {
        let vars = params.named_vars();
        let zeros = |v: &Var| Tensor::zeros(v.shape(), v.dtype(), &Device::Cpu);
        let m = vars.iter().map(|(_, v)| zeros(v)).collect::<Result<_, _>>()?;
        let v = vars.iter().map(|(_, v)| zeros(v)).collect::<Result<_, _>>()?;
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Variables without a gradient (unused in the graph)
    /// are left untouched but still age the step counter.
    pub fn step(&mut self, grads: &GradStore, lr: f64, max_norm: Option<f64>) -> Result<StepInfo> {
        let mut sq = 0.0;
        let gs: Vec<Option<Tensor>> = self
            .vars
            .iter()
            .map(|(_, v)| grads.get(v.as_tensor()).map(Tensor::detach))
            .collect();
        for g in gs.iter().flatten() {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {grad_norm}")));
        }
        let (scale, clipped) = match max_norm {
            Some(max) if grad_norm > max => (max / grad_norm, true),
            _ => (1.0, false),
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in gs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let g = if clipped { (g * scale)? } else { g };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = (m_hat.div(&denom)? * lr)?;
            let var = &self.vars[i].1;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(StepInfo { grad_norm, clipped })
    }

    /// Moment buffers as `(name, shape, data)` with `.m` / `.v` suffixes.
    pub fn export(&self) -> Result<Vec<NamedBuffer>> {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (suffix, t) in [("m", &self.m[i]), ("v", &self.v[i])] {
                let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                out.push((format!("{name}.{suffix}"), var.dims().to_vec(), data));
            }
        }
        Ok(out)
    }

    /// Restores moments and the step counter; every moment must be present.
    pub fn import(&mut self, step: u64, mut lookup: impl FnMut(&str) -> Option<(Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for suffix in ["m", "v"] {
                let key = format!("{name}.{suffix}");
                let (shape, data) =
                    lookup(&key).ok_or_else(|| Error::CorruptBlob(format!("missing optimizer state {key}")))?;
                if shape != var.dims() {
                    return Err(Error::shape(format!("optimizer state {key} has shape {shape:?}")));
                }
                let t = Tensor::from_slice(&data, shape.as_slice(), &Device::Cpu)?.to_dtype(var.dtype())?;
                if suffix == "m" {
                    self.m[i] = t;
                } else {
                    self.v[i] = t;
                }
            }
        }
        self.step = step;
        Ok(())
    }
}
