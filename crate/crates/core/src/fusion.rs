//! Fusion sub-network: per-modality dilated residual dense extractors,
//! semantic refinement through HIA, and a small convolutional decoder.
//!
//! The forward pass runs twice over the decoder. Pass A decodes the raw
//! modality features into a preliminary image `u_pre`. The segmentation
//! encoder reads `u_pre`, its tapped stages refine the modality features
//! through the HIA blocks, and pass B decodes the refined features into `u`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hia::{HiaBlock, HiaConfig, HiaTrace};
use crate::nn::ops::{leaky_relu, sigmoid};
use crate::nn::{Conv2d, ConvSpec, Init, Param, ParamBuilder};
use crate::seg::{FeatureMap, SegConfig, SegNet, SemanticTaps};

const SLOPE: f64 = 0.2;

/// Init for convolutions feeding a LeakyReLU.
fn he(fan_in: usize) -> Init {
    Init::He { fan_in, slope: SLOPE }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// Second block refines the output of the first.
    #[default]
    Sequential,
    /// Both blocks read the unrefined features; their branches add up.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub base_channels: usize,
    pub growth: usize,
    pub layers: usize,
    pub dilation: usize,
    pub decoder_width: usize,
    pub hia_enabled: bool,
    pub arrangement: Arrangement,
    /// Encoder stages feeding the two HIA blocks, in application order.
    pub tap_stages: [usize; 2],
    pub tap_channels: usize,
    pub hia: HiaConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            growth: 16,
            layers: 3,
            dilation: 2,
            decoder_width: 32,
            hia_enabled: true,
            arrangement: Arrangement::Sequential,
            tap_stages: [0, 1],
            tap_channels: 32,
            hia: HiaConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("base_channels", self.base_channels),
            ("growth", self.growth),
            ("layers", self.layers),
            ("dilation", self.dilation),
            ("decoder_width", self.decoder_width),
            ("tap_channels", self.tap_channels),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::config(format!("fusion {name} must be positive")));
            }
        }
        self.hia.validate()
    }
}

/// Checks a `(B, 1, H, W)` input and returns its dims.
fn check_gray(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!(
            "expected a single-channel image, got {c} channels"
        )));
    }
    Ok((b, h, w))
}

/// Stem convolution followed by one dilated residual dense block.
pub struct Drdb {
    stem: Conv2d,
    dense: Vec<Conv2d>,
    fuse: Conv2d,
}

impl Drdb {
    pub fn new(pb: &ParamBuilder, cfg: &FusionConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let dense = (0..cfg.layers)
            .map(|i| {
                let in_ch = c + i * cfg.growth;
                Conv2d::with_init(
                    &pb.pp(format!("dense{i}")),
                    in_ch,
                    cfg.growth,
                    ConvSpec::same(3, cfg.dilation),
                    he(9 * in_ch),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem: Conv2d::with_init(&pb.pp("stem"), 1, c, ConvSpec::same(3, 1), he(9))?,
            dense,
            fuse: Conv2d::new(&pb.pp("fuse"), c + cfg.layers * cfg.growth, c, ConvSpec::same(1, 1))?,
        })
    }

    /// `(B, 1, H, W)` → `(B, C_f, H, W)`.
    pub fn forward(&self, gray: &Tensor) -> Result<Tensor> {
        check_gray(gray)?;
        let stem = leaky_relu(&self.stem.forward(gray)?, SLOPE)?;
        let mut features = stem.clone();
        for conv in &self.dense {
            let g = leaky_relu(&conv.forward(&features)?, SLOPE)?;
            features = Tensor::cat(&[&features, &g], 1)?;
        }
        Ok((self.fuse.forward(&features)? + stem)?)
    }

    pub fn stem_weight(&self) -> &Param {
        self.stem.weight()
    }

    pub fn dense_weight(&self, i: usize) -> Option<&Param> {
        self.dense.get(i).map(|c| c.weight())
    }
}

/// Concatenate both modalities, two 3×3 convolutions, sigmoid.
pub struct FuseDecoder {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl FuseDecoder {
    pub fn new(pb: &ParamBuilder, cfg: &FusionConfig) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::with_init(
                &pb.pp("conv1"),
                2 * cfg.base_channels,
                cfg.decoder_width,
                ConvSpec::same(3, 1),
                he(18 * cfg.base_channels),
            )?,
            conv2: Conv2d::new(&pb.pp("conv2"), cfg.decoder_width, 1, ConvSpec::same(3, 1))?,
        })
    }

    /// `(B, 1, H, W)` fused image in `[0, 1]`.
    pub fn forward(&self, f_ir: &Tensor, f_vis: &Tensor) -> Result<Tensor> {
        if f_ir.dims() != f_vis.dims() {
            return Err(Error::shape(format!(
                "decoder inputs differ: {:?} vs {:?}",
                f_ir.dims(),
                f_vis.dims()
            )));
        }
        let x = Tensor::cat(&[f_ir, f_vis], 1)?;
        let x = leaky_relu(&self.conv1.forward(&x)?, SLOPE)?;
        sigmoid(&self.conv2.forward(&x)?)
    }
}

/// Everything a fusion forward pass exposes besides the fused image.
pub struct FusionDiagnostics {
    pub u_pre: Tensor,
    pub taps: Option<[FeatureMap; 2]>,
    pub traces: Vec<HiaTrace>,
}

pub struct FusionOutput {
    /// `(B, 1, H, W)` in `[0, 1]`.
    pub fused: Tensor,
    pub diagnostics: FusionDiagnostics,
}

pub struct FusionNet {
    config: FusionConfig,
    drdb_ir: Drdb,
    drdb_vis: Drdb,
    decoder: FuseDecoder,
    taps: SemanticTaps,
    hia: [HiaBlock; 2],
}

impl FusionNet {
    pub fn new(pb: &ParamBuilder, cfg: &FusionConfig, seg: &SegConfig) -> Result<Self> {
        cfg.validate()?;
        let block = |i: usize| HiaBlock::new(&pb.pp(format!("hia{i}")), &cfg.hia, cfg.base_channels, cfg.tap_channels);
        Ok(Self {
            config: cfg.clone(),
            drdb_ir: Drdb::new(&pb.pp("drdb_ir"), cfg)?,
            drdb_vis: Drdb::new(&pb.pp("drdb_vis"), cfg)?,
            decoder: FuseDecoder::new(&pb.pp("decoder"), cfg)?,
            taps: SemanticTaps::new(pb, seg, cfg.tap_stages, cfg.tap_channels)?,
            hia: [block(0)?, block(1)?],
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Fuses visible luma `x` with infrared `y`, both `(B, 1, H, W)`.
    pub fn forward(&self, x: &Tensor, y: &Tensor, seg: &SegNet) -> Result<FusionOutput> {
        let (b, h, w) = check_gray(x)?;
        if check_gray(y)? != (b, h, w) {
            return Err(Error::shape("visible and infrared inputs differ in shape"));
        }
        let f_vis = self.drdb_vis.forward(x)?;
        let f_ir = self.drdb_ir.forward(y)?;
        let u_pre = self.decoder.forward(&f_ir, &f_vis)?;
        if !self.config.hia_enabled {
            return Ok(FusionOutput {
                fused: u_pre.clone(),
                diagnostics: FusionDiagnostics {
                    u_pre,
                    taps: None,
                    traces: Vec::new(),
                },
            });
        }

        let pyramid = seg.encode(&u_pre.repeat((1, 3, 1, 1))?)?;
        let taps = self.taps.forward(&pyramid, (h, w))?;
        let mut traces = Vec::with_capacity(2);
        let (r_ir, r_vis) = match self.config.arrangement {
            Arrangement::Sequential => {
                let (mut a, mut v) = (f_ir, f_vis);
                for (block, tap) in self.hia.iter().zip(&taps) {
                    let (na, nv, t) = block.forward(&a, &v, &tap.tensor)?;
                    traces.push(t);
                    (a, v) = (na, nv);
                }
                (a, v)
            }
            Arrangement::Parallel => {
                let (mut a, mut v) = (f_ir.clone(), f_vis.clone());
                for (block, tap) in self.hia.iter().zip(&taps) {
                    let (da, dv, t) = block.branches(&f_ir, &f_vis, &tap.tensor)?;
                    traces.push(t);
                    (a, v) = ((a + da)?, (v + dv)?);
                }
                (a, v)
            }
        };
        Ok(FusionOutput {
            fused: self.decoder.forward(&r_ir, &r_vis)?,
            diagnostics: FusionDiagnostics {
                u_pre,
                taps: Some(taps),
                traces,
            },
        })
    }

    pub fn drdb_ir(&self) -> &Drdb {
        &self.drdb_ir
    }

    pub fn drdb_vis(&self) -> &Drdb {
        &self.drdb_vis
    }

    pub fn decoder(&self) -> &FuseDecoder {
        &self.decoder
    }

    pub fn hia_blocks(&self) -> &[HiaBlock; 2] {
        &self.hia
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use candle_core::{DType, Device};

    fn small_seg() -> SegConfig {
        SegConfig {
            widths: [8, 16, 16, 16],
            depths: [1, 1, 1, 1],
            heads: [1, 1, 1, 1],
            decoder_width: 16,
            ..SegConfig::default()
        }
    }

    fn small_fusion() -> FusionConfig {
        FusionConfig {
            base_channels: 8,
            growth: 4,
            decoder_width: 8,
            tap_channels: 8,
            hia: HiaConfig {
                channels: 8,
                heads: 2,
                ..HiaConfig::default()
            },
            ..FusionConfig::default()
        }
    }

    fn build(cfg: &FusionConfig, dtype: DType) -> (ParamSet, SegNet, ParamSet, FusionNet) {
        let seg_set = ParamSet::new(dtype, 1);
        let seg = SegNet::new(&seg_set.builder(), &small_seg()).unwrap();
        let fus_set = ParamSet::new(dtype, 2);
        let net = FusionNet::new(&fus_set.builder(), cfg, &small_seg()).unwrap();
        (seg_set, seg, fus_set, net)
    }

    fn rand(shape: (usize, usize, usize, usize), lo: f32, hi: f32) -> Tensor {
        Tensor::rand(lo, hi, shape, &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all()
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
    }

    #[test]
    fn drdb_shapes_and_zero_input() {
        let set = ParamSet::new(DType::F32, 0);
        let cfg = FusionConfig::default();
        let d = Drdb::new(&set.builder(), &cfg).unwrap();
        let out = d
            .forward(&Tensor::zeros((1, 1, 96, 96), DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(out.dims(), &[1, 32, 96, 96]);
        assert!(values(&out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drdb_rejects_multichannel() {
        let set = ParamSet::new(DType::F32, 0);
        let d = Drdb::new(&set.builder(), &small_fusion()).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.forward(&x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn drdb_is_deterministic() {
        let x = rand((1, 1, 16, 16), 0.0, 1.0);
        let run = || {
            let set = ParamSet::new(DType::F32, 5);
            let d = Drdb::new(&set.builder(), &small_fusion()).unwrap();
            values(&d.forward(&x).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decoder_range_and_asymmetry() {
        let set = ParamSet::new(DType::F32, 3);
        let dec = FuseDecoder::new(&set.builder(), &FusionConfig::default()).unwrap();
        let a = rand((1, 32, 96, 96), -10.0, 10.0);
        let b = rand((1, 32, 96, 96), -10.0, 10.0);
        let u = dec.forward(&a, &b).unwrap();
        assert_eq!(u.dims(), &[1, 1, 96, 96]);
        let v = values(&u);
        assert!(v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
        assert_ne!(v, values(&dec.forward(&b, &a).unwrap()));
        let c = rand((1, 16, 96, 96), 0.0, 1.0);
        assert!(matches!(dec.forward(&a, &c), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn identity_at_init_is_bitwise() {
        let (_, seg, _, net) = build(&small_fusion(), DType::F32);
        let x = rand((1, 1, 40, 48), 0.0, 1.0);
        let y = rand((1, 1, 40, 48), 0.0, 1.0);
        let out = net.forward(&x, &y, &seg).unwrap();
        assert_eq!(out.fused.dims(), &[1, 1, 40, 48]);
        assert_eq!(values(&out.fused), values(&out.diagnostics.u_pre));
        assert_eq!(out.diagnostics.traces.len(), 2);
        let taps = out.diagnostics.taps.unwrap();
        assert_eq!(taps[1].tensor.dims(), &[1, 8, 40, 48]);

        let off = FusionConfig {
            hia_enabled: false,
            ..small_fusion()
        };
        let (_, seg2, _, net2) = build(&off, DType::F32);
        assert_eq!(values(&net2.forward(&x, &y, &seg2).unwrap().fused), values(&out.fused));
    }

    #[test]
    fn parallel_arrangement_is_also_identity_at_init() {
        let cfg = FusionConfig {
            arrangement: Arrangement::Parallel,
            ..small_fusion()
        };
        let (_, seg, _, net) = build(&cfg, DType::F32);
        let x = rand((1, 1, 16, 16), 0.0, 1.0);
        let out = net.forward(&x, &x, &seg).unwrap();
        assert_eq!(values(&out.fused), values(&out.diagnostics.u_pre));
    }

    #[test]
    fn output_range_for_extreme_inputs() {
        let (_, seg, _, net) = build(&small_fusion(), DType::F32);
        let x = rand((1, 1, 16, 16), -50.0, 50.0);
        let y = rand((1, 1, 16, 16), -50.0, 50.0);
        let v = values(&net.forward(&x, &y, &seg).unwrap().fused);
        assert!(v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let (_, seg, _, net) = build(&small_fusion(), DType::F32);
        let x = rand((1, 1, 16, 16), 0.0, 1.0);
        let y = rand((1, 1, 16, 24), 0.0, 1.0);
        assert!(matches!(net.forward(&x, &y, &seg), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn parameter_names_are_namespaced() {
        let (seg_set, _, fus_set, _) = build(&small_fusion(), DType::F32);
        let names: Vec<String> = fus_set.named_vars().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n == "drdb_ir.dense2.weight"));
        assert!(names.iter().any(|n| n == "hia1.mlp_vis.fc2.weight"));
        assert!(names.iter().any(|n| n == "taps.proj0.weight"));
        assert!(seg_set.named_vars().iter().all(|(n, _)| !n.starts_with("taps")));
    }
}
