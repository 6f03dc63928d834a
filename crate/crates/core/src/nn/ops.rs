//! Differentiable tensor helpers missing from `candle-core`.
//!
//! Spatial resampling and separable blurs are expressed as products with small
//! dense operator matrices (`out = R_h · X · R_wᵀ`). That keeps them exact,
//! deterministic and differentiable through `matmul` alone.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

/// Row-major `out × input` matrix for 1-D bilinear resampling with half-pixel
/// centers (`align_corners = false`).
pub fn bilinear_matrix(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let w1 = src - i0 as f64;
        m[o * input + i0] += 1.0 - w1;
        m[o * input + i1] += w1;
    }
    m
}

/// Normalized 1-D Gaussian taps of odd length `k`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let w: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Row-major `n × n` matrix applying `taps` with replicate (edge-clamped) padding.
pub fn blur_matrix(n: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut m = vec![0.0; n * n];
    for i in 0..n as isize {
        for (t, &w) in taps.iter().enumerate() {
            let j = (i + t as isize - r).clamp(0, n as isize - 1);
            m[i as usize * n + j as usize] += w;
        }
    }
    m
}

fn matrix(data: Vec<f64>, rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Applies `rows` (`oh × h`) and `cols` (`ow × w`) operators to the two
/// trailing axes of `x`.
pub fn apply_separable(x: &Tensor, rows: &Tensor, cols: &Tensor) -> Result<Tensor> {
    let y = x.broadcast_matmul(&cols.t()?)?;
    Ok(rows.broadcast_matmul(&y)?)
}

/// Bilinear resize of the trailing `(h, w)` axes.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(Error::shape("resize needs at least two axes"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let rows = matrix(bilinear_matrix(oh, h), oh, h, x.dtype())?;
    let cols = matrix(bilinear_matrix(ow, w), ow, w, x.dtype())?;
    apply_separable(x, &rows, &cols)
}

/// Separable Gaussian blur with replicate padding on the trailing axes.
pub fn gaussian_blur(x: &Tensor, k: usize, sigma: f64) -> Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let taps = gaussian_kernel(k, sigma);
    let rows = matrix(blur_matrix(h, &taps), h, h, x.dtype())?;
    let cols = matrix(blur_matrix(w, &taps), w, w, x.dtype())?;
    apply_separable(x, &rows, &cols)
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Reflect-pads (mirror without edge repeat) the trailing two axes on the
/// bottom and right.
pub fn reflect_pad_br(x: &Tensor, pad_h: usize, pad_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    let nd = dims.len();
    let (h, w) = (dims[nd - 2], dims[nd - 1]);
    let mut y = x.clone();
    if pad_h > 0 {
        let idx: Vec<u32> = (0..h + pad_h).map(|i| reflect_index(i as isize, h) as u32).collect();
        y = y.index_select(&Tensor::new(idx, &Device::Cpu)?, nd - 2)?;
    }
    if pad_w > 0 {
        let idx: Vec<u32> = (0..w + pad_w).map(|i| reflect_index(i as isize, w) as u32).collect();
        y = y.index_select(&Tensor::new(idx, &Device::Cpu)?, nd - 1)?;
    }
    Ok(y)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax along `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `(B, C, H, W) -> (B, H·W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H·W, C) -> (B, C, H, W)`.
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens cannot form {h}x{w}")));
    }
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Sum of squares over every element, as `f64`.
pub fn sum_sq(x: &Tensor) -> Result<f64> {
    Ok(x.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean over the last axis, keeping it.
pub fn mean_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(96, 24), (24, 96), (7, 3), (3, 3)] {
            let m = bilinear_matrix(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let x = t(vec![0.25; 12], 3, 4);
        let y = resize_bilinear(&x, 9, 5).unwrap();
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_by_two_matches_half_pixel_rule() {
        // [0, 1] -> [0, 0.25, 0.75, 1]
        let x = t(vec![0.0, 1.0], 1, 2);
        let y = resize_bilinear(&x, 1, 4).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let x = t(vec![0.7; 25], 5, 5);
        let y = gaussian_blur(&x, 7, 1.4).unwrap();
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_pad_mirrors() {
        let x = t(vec![1.0, 2.0, 3.0], 1, 3);
        let y = reflect_pad_br(&x, 0, 3).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![1.0, 2.0, 3.0, 2.0, 1.0, 2.0]
        );
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -5.0]], &Device::Cpu).unwrap();
        let s = softmax(&x, 1).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax(&x, 1).unwrap().exp().unwrap();
        let p = softmax(&x, 1).unwrap();
        let d = (ls - p).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn token_reshape_round_trip() {
        let x = Tensor::arange(0f64, 24.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 3, 4))
            .unwrap();
        let tok = to_tokens(&x).unwrap();
        assert_eq!(tok.dims(), &[1, 12, 2]);
        // token (row 1, col 2) carries both channels
        let v = tok.get(0).unwrap().get(6).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![6.0, 18.0]);
        let back = from_tokens(&tok, 3, 4).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }
}
