//! Training objectives for the fusion and segmentation networks.
//!
//! Images enter as `(B, 1, H, W)` tensors in `[0, 1]`. Squared-norm terms are
//! means over pixels, so loss magnitudes do not depend on the crop size.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{gaussian_blur, log_softmax, scalar};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-pixel SSIM map with an 11×11 Gaussian window (σ = 1.5) and replicate
/// padding, so every pixel has a full window.
pub fn ssim_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    let blur = |t: &Tensor| gaussian_blur(t, SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let mu_a2 = mu_a.sqr()?;
    let mu_b2 = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (blur(&a.sqr()?)? - &mu_a2)?;
    let var_b = (blur(&b.sqr()?)? - &mu_b2)?;
    let cov = (blur(&(a * b)?)? - &mu_ab)?;
    let num = (((mu_ab * 2.0)? + SSIM_C1)? * ((cov * 2.0)? + SSIM_C2)?)?;
    let den = (((mu_a2 + mu_b2)? + SSIM_C1)? * ((var_a + var_b)? + SSIM_C2)?)?;
    Ok((num / den)?)
}

/// Mean SSIM over all pixels (and batch items), as a scalar tensor.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(ssim_map(a, b)?.mean_all()?)
}

/// `(1 − SSIM(u, x))/2 + (1 − SSIM(u, y))/2`.
pub fn loss_ssim(u: &Tensor, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(u, y)?;
    let sx = ssim(u, x)?;
    let sy = ssim(u, y)?;
    Ok(((2.0 - (sx + sy)?)? / 2.0)?)
}

/// Histogram-contrast saliency of one image, normalized by its maximum.
///
/// Pixels are quantized to 256 levels; a constant image has zero saliency.
pub fn vsm(pixels: &[f32]) -> Vec<f32> {
    let level = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    let mut hist = [0u64; 256];
    for &p in pixels {
        hist[level(p)] += 1;
    }
    let table: Vec<f64> = (0..256i64)
        .map(|i| {
            hist.iter()
                .enumerate()
                .map(|(j, &n)| n as f64 * (i - j as i64).abs() as f64)
                .sum()
        })
        .collect();
    let sal: Vec<f64> = pixels.iter().map(|&p| table[level(p)]).collect();
    let max = sal.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0.0; pixels.len()];
    }
    sal.into_iter().map(|s| (s / max) as f32).collect()
}

/// Complementary per-pixel weights `m1 + m2 = 1`.
#[derive(Debug, Clone)]
pub struct SaliencyWeights {
    pub m1: Tensor,
    pub m2: Tensor,
}

/// `m1 = 0.5 + (vsm(x) − vsm(y))/2`, `m2 = 1 − m1`, per batch item.
pub fn saliency_weights(x: &Tensor, y: &Tensor) -> Result<SaliencyWeights> {
    same_shape(x, y)?;
    let (b, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape("saliency weights need single-channel images"));
    }
    let xs = x.to_dtype(DType::F32)?.reshape((b, h * w))?.to_vec2::<f32>()?;
    let ys = y.to_dtype(DType::F32)?.reshape((b, h * w))?.to_vec2::<f32>()?;
    let mut m1 = Vec::with_capacity(b * h * w);
    for (xi, yi) in xs.iter().zip(&ys) {
        let (sx, sy) = (vsm(xi), vsm(yi));
        m1.extend(sx.iter().zip(&sy).map(|(a, b)| 0.5 + (a - b) / 2.0));
    }
    let m1 = Tensor::from_vec(m1, (b, 1, h, w), &Device::Cpu)?.to_dtype(x.dtype())?;
    let m2 = (1.0 - &m1)?;
    Ok(SaliencyWeights { m1, m2 })
}

/// `mean((u − m1⊙x)²) + mean((u − m2⊙y)²)`.
pub fn loss_mse(u: &Tensor, x: &Tensor, y: &Tensor, weights: &SaliencyWeights) -> Result<Tensor> {
    same_shape(u, x)?;
    same_shape(u, y)?;
    same_shape(u, &weights.m1)?;
    let a = (u - (&weights.m1 * x)?)?.sqr()?.mean_all()?;
    let b = (u - (&weights.m2 * y)?)?.sqr()?.mean_all()?;
    Ok((a + b)?)
}

/// Blur width tied to the kernel size: `0.3·((k−1)/2 − 1) + 0.8`.
pub fn dog_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn check_kernel(k: usize) -> Result<()> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(Error::config(format!(
            "gradient kernel size must be odd and at least 3, got {k}"
        )));
    }
    Ok(())
}

/// High-pass detail `img − G_k(img)` with replicate padding.
pub fn dog_gradient(img: &Tensor, k: usize) -> Result<Tensor> {
    check_kernel(k)?;
    Ok((img - gaussian_blur(img, k, dog_sigma(k))?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientConfig {
    pub kernel_sizes: Vec<usize>,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![3, 5, 7],
        }
    }
}

impl GradientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() {
            return Err(Error::config("gradient loss needs at least one kernel size"));
        }
        self.kernel_sizes.iter().try_for_each(|&k| check_kernel(k))
    }
}

/// The larger-magnitude of `a` and `b` with its sign; ties take the signed
/// maximum, keeping the selection symmetric.
pub fn magnitude_max(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (aa, ab) = (a.abs()?, b.abs()?);
    let tie = a.maximum(b)?;
    let pick_b = ab.gt(&aa)?.where_cond(b, &tie)?;
    Ok(aa.gt(&ab)?.where_cond(a, &pick_b)?)
}

/// `Σ_k mean((∇ᵏu − T_k)²)` with `T_k` the magnitude-wise max of `∇ᵏx`, `∇ᵏy`.
pub fn loss_grad(u: &Tensor, x: &Tensor, y: &Tensor, cfg: &GradientConfig) -> Result<Tensor> {
    same_shape(u, x)?;
    same_shape(u, y)?;
    cfg.validate()?;
    let mut total: Option<Tensor> = None;
    for &k in &cfg.kernel_sizes {
        let target = magnitude_max(&dog_gradient(&x.detach(), k)?, &dog_gradient(&y.detach(), k)?)?;
        let term = (dog_gradient(u, k)? - target)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("validated non-empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionLossConfig {
    pub eta: f64,
    pub gradient: GradientConfig,
}

impl Default for FusionLossConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            gradient: GradientConfig::default(),
        }
    }
}

impl FusionLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        self.gradient.validate()
    }
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ssim: f64,
    pub l_mse: f64,
    pub l_grad: f64,
    pub l_fusion: f64,
    pub l_seg: f64,
    pub eta: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_ssim, self.l_mse, self.l_grad, self.l_fusion, self.l_seg]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable fusion loss and its components.
pub struct FusionLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// `L_f = L_SSIM + L_MSE + η·L_grad`.
pub fn loss_fusion(u: &Tensor, x: &Tensor, y: &Tensor, cfg: &FusionLossConfig) -> Result<FusionLoss> {
    cfg.validate()?;
    let weights = saliency_weights(x, y)?;
    let l_ssim = loss_ssim(u, x, y)?;
    let l_mse = loss_mse(u, x, y, &weights)?;
    let l_grad = loss_grad(u, x, y, &cfg.gradient)?;
    let total = ((&l_ssim + &l_mse)? + (&l_grad * cfg.eta)?)?;
    let breakdown = LossBreakdown {
        l_ssim: scalar(&l_ssim)?,
        l_mse: scalar(&l_mse)?,
        l_grad: scalar(&l_grad)?,
        l_fusion: scalar(&total)?,
        l_seg: 0.0,
        eta: cfg.eta,
    };
    Ok(FusionLoss { total, breakdown })
}

/// Mean cross-entropy of `(B, K, H, W)` logits over pixels whose label is
/// not `ignore_index`. `labels` is row-major `B·H·W`.
pub fn loss_seg(logits: &Tensor, labels: &[u16], ignore_index: u16) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.len() != b * h * w {
        return Err(Error::shape(format!(
            "{} labels for logits of {b}x{h}x{w}",
            labels.len()
        )));
    }
    let plane = h * w;
    let mut onehot = vec![0f32; b * k * plane];
    let mut count = 0usize;
    for (i, &c) in labels.iter().enumerate() {
        if c == ignore_index {
            continue;
        }
        if c as usize >= k {
            return Err(Error::config(format!("label {c} outside {k} classes")));
        }
        let (bi, p) = (i / plane, i % plane);
        onehot[(bi * k + c as usize) * plane + p] = 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyTarget);
    }
    let mask = Tensor::from_vec(onehot, (b, k, h, w), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let nll = (log_softmax(logits, 1)? * mask)?.sum_all()?.neg()?;
    Ok((nll / count as f64)?)
}
