//! The joint model: a segmentation network and a fusion network, each with
//! its own parameter set so either can be frozen while the other trains.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionNet, FusionOutput};
use crate::nn::ParamSet;
use crate::seg::{SegConfig, SegNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub seg: SegConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.seg.validate()?;
        self.fusion.validate()?;
        if self.seg.in_channels != 3 {
            return Err(Error::config("the segmentation network reads 3-channel images"));
        }
        Ok(())
    }
}

pub struct Model {
    pub seg_params: ParamSet,
    pub fusion_params: ParamSet,
    pub seg: SegNet,
    pub fusion: FusionNet,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let seg_params = ParamSet::new(dtype, seed);
        let fusion_params = ParamSet::new(dtype, seed.wrapping_add(1));
        let seg = SegNet::new(&seg_params.builder(), &cfg.seg)?;
        let fusion = FusionNet::new(&fusion_params.builder(), &cfg.fusion, &cfg.seg)?;
        Ok(Self {
            seg_params,
            fusion_params,
            seg,
            fusion,
        })
    }

    pub fn dtype(&self) -> DType {
        self.seg_params.dtype()
    }

    /// Fuses `(B, 1, H, W)` visible luma and infrared.
    pub fn fuse(&self, visible: &Tensor, infrared: &Tensor) -> Result<FusionOutput> {
        self.fusion.forward(visible, infrared, &self.seg)
    }

    /// Class scores for a `(B, 1, H, W)` fused image.
    pub fn segment(&self, fused: &Tensor) -> Result<Tensor> {
        self.seg.forward(&fused.repeat((1, 3, 1, 1))?)
    }
}

/// A stacked batch of samples as `(B, 1, H, W)` tensors plus flat labels.
pub struct Batch {
    pub visible: Tensor,
    pub infrared: Tensor,
    pub labels: Option<Vec<u16>>,
}

impl Batch {
    pub fn new(samples: &[&Sample], dtype: DType) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::shape("empty batch"))?;
        let (h, w) = (first.height, first.width);
        let mut vis = Vec::with_capacity(samples.len() * h * w);
        let mut ir = Vec::with_capacity(samples.len() * h * w);
        let mut labels = Some(Vec::with_capacity(samples.len() * h * w));
        for s in samples {
            if (s.height, s.width) != (h, w) {
                return Err(Error::shape("batch samples differ in size"));
            }
            vis.extend_from_slice(&s.visible);
            ir.extend_from_slice(&s.infrared);
            match (&mut labels, &s.label) {
                (Some(all), Some(l)) => all.extend_from_slice(l),
                _ => labels = None,
            }
        }
        let shape = (samples.len(), 1, h, w);
        Ok(Self {
            visible: Tensor::from_vec(vis, shape, &Device::Cpu)?.to_dtype(dtype)?,
            infrared: Tensor::from_vec(ir, shape, &Device::Cpu)?.to_dtype(dtype)?,
            labels,
        })
    }
}
