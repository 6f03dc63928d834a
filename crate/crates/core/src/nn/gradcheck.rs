//! Central finite-difference comparison against autograd gradients.

use candle_core::{Tensor, Var};

use super::ops::scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| <= rtol·max(|a|, |n|) + atol`.
    pub fn agrees(&self, rtol: f64, atol: f64) -> bool {
        (self.analytic - self.numeric).abs() <= rtol * self.analytic.abs().max(self.numeric.abs()) + atol
    }
}

fn set_flat(var: &Var, flat: &[f64]) -> Result<()> {
    let t = Tensor::from_slice(flat, var.dims(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares `d loss / d var[i]` for each flat index in `indices`.
///
/// `var` must be an `f64` variable; it is restored on return.
pub fn check<F>(var: &Var, indices: &[usize], eps: f64, loss: F) -> Result<Vec<GradSample>>
where
    F: Fn() -> Result<Tensor>,
{
    let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    let grads = loss()?.backward()?;
    let g = grads
        .get(var.as_tensor())
        .ok_or_else(|| Error::Numerical("variable takes no part in the loss".into()))?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        set_flat(var, &p)?;
        let up = scalar(&loss()?)?;
        p[i] = base[i] - eps;
        set_flat(var, &p)?;
        let down = scalar(&loss()?)?;
        out.push(GradSample {
            index: i,
            analytic: g[i],
            numeric: (up - down) / (2.0 * eps),
        });
    }
    set_flat(var, &base)?;
    Ok(out)
}
