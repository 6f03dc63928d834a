use candle_core::{Tensor, D};

use super::params::{Init, Param, ParamBuilder};
use crate::error::{Error, Result};

/// Affine map over the last axis: `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Option<Param>,
    in_dim: usize,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(pb, in_dim, out_dim, Init::FanIn(in_dim), true)
    }

    pub fn with_init(pb: &ParamBuilder, in_dim: usize, out_dim: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = pb.param("weight", &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(pb.param("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim })
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(D::Minus1)? != self.in_dim {
            return Err(Error::shape(format!(
                "linear expects {} input features, got {:?}",
                self.in_dim,
                x.dims()
            )));
        }
        let y = x.broadcast_matmul(&self.weight.tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.tensor())?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride-1 convolution keeping the spatial size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

/// Dense 2-D convolution over `(B, C, H, W)` with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Param,
    spec: ConvSpec,
    in_ch: usize,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize, spec: ConvSpec) -> Result<Self> {
        Self::with_init(pb, in_ch, out_ch, spec, Init::FanIn(in_ch * spec.kernel * spec.kernel))
    }

    /// Weight drawn from `init`; bias zero.
    pub fn with_init(pb: &ParamBuilder, in_ch: usize, out_ch: usize, spec: ConvSpec, init: Init) -> Result<Self> {
        let weight = pb.param("weight", &[out_ch, in_ch, spec.kernel, spec.kernel], init)?;
        let bias = pb.param("bias", &[out_ch], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            spec,
            in_ch,
        })
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::shape(format!("conv expects {} channels, got {c}", self.in_ch)));
        }
        let s = self.spec;
        let y = x
            .contiguous()?
            .conv2d(&self.weight.tensor(), s.padding, s.stride, s.dilation, 1)?;
        let b = self.bias.tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Per-channel 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3 {
    weight: Param,
    bias: Param,
    channels: usize,
}

impl DepthwiseConv3 {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", &[channels, 9], Init::FanIn(9))?,
            bias: pb.param("bias", &[channels], Init::Zeros)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape("depthwise conv channel mismatch"));
        }
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let weight = self.weight.tensor();
        let mut acc: Option<Tensor> = None;
        for tap in 0..9 {
            let (dy, dx) = (tap / 3, tap % 3);
            let win = padded.narrow(2, dy, h)?.narrow(3, dx, w)?;
            let k = weight.narrow(1, tap, 1)?.reshape((1, c, 1, 1))?;
            let term = win.broadcast_mul(&k)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        let b = self.bias.tensor().reshape((1, c, 1, 1))?;
        Ok(acc.expect("nine taps").broadcast_add(&b)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Param,
    beta: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("weight", &[dim], Init::Ones)?,
            beta: pb.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.tensor())?
            .broadcast_add(&self.beta.tensor())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamSet;
    use candle_core::{DType, Device};

    #[test]
    fn linear_identity() {
        let set = ParamSet::new(DType::F64, 0);
        let l = Linear::with_init(&set.builder(), 3, 3, Init::Identity, true).unwrap();
        let x = Tensor::new(&[[1.0f64, -2.0, 3.5]], &Device::Cpu).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), vec![vec![1.0, -2.0, 3.5]]);
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let set = ParamSet::new(DType::F64, 5);
        let dw = DepthwiseConv3::new(&set.builder(), 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 6), &Device::Cpu).unwrap();
        let got = dw.forward(&x).unwrap();
        let k = dw.weight.tensor().reshape((3, 1, 3, 3)).unwrap();
        let expect = x.conv2d(&k, 1, 1, 1, 3).unwrap();
        let d = (got - expect).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_normalizes() {
        let set = ParamSet::new(DType::F64, 0);
        let ln = LayerNorm::new(&set.builder(), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let set = ParamSet::new(DType::F32, 0);
        let c = Conv2d::new(&set.builder(), 2, 4, ConvSpec::same(3, 1)).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(c.forward(&x), Err(Error::ShapeMismatch(_))));
    }
}
