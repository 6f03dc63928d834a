//! Hierarchical transformer segmentation network.
//!
//! Four stages of overlapping patch embedding followed by transformer blocks
//! with spatially reduced attention and a depthwise-convolution feed-forward.
//! An all-MLP head fuses the four scales into per-pixel class scores.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{from_tokens, reflect_pad_br, resize_bilinear, softmax, to_tokens};
use crate::nn::{Conv2d, ConvSpec, DepthwiseConv3, LayerNorm, Linear, ParamBuilder};

/// Spatial size multiple the encoder works on; other sizes are reflect-padded.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder_width: usize,
    pub num_classes: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [16, 32, 64, 128],
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            decoder_width: 64,
            num_classes: 4,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.widths[i] == 0 || self.heads[i] == 0 || self.sr_ratios[i] == 0 {
                return Err(Error::config("segmentation widths, heads and ratios must be positive"));
            }
            if !self.widths[i].is_multiple_of(self.heads[i]) {
                return Err(Error::config(format!(
                    "stage {i}: width {} not divisible by {} heads",
                    self.widths[i], self.heads[i]
                )));
            }
        }
        if self.num_classes < 2 || self.decoder_width == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return Err(Error::config(
                "segmentation head sizes must be positive (num_classes >= 2)",
            ));
        }
        Ok(())
    }
}

/// Zero mean and unit variance per sample, so the encoder sees the same
/// input under any affine change of intensity.
fn standardize(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((1, 2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((1, 2, 3))?;
    Ok(centered.broadcast_div(&(var + STANDARDIZE_EPS)?.sqrt()?)?)
}

const STANDARDIZE_EPS: f64 = 1e-4;

/// Activations of one encoder stage, `(B, C, h, w)`, with their stride.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
}

/// Encoder output plus the padding bookkeeping needed to undo it.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub stages: Vec<FeatureMap>,
    pub input_hw: (usize, usize),
    pub padded_hw: (usize, usize),
}

struct PatchEmbed {
    proj: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = self.proj.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        Ok((self.norm.forward(&to_tokens(&y)?)?, h, w))
    }
}

struct EfficientAttention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    dim: usize,
}

impl EfficientAttention {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let dh = c / self.heads;
        let q = self
            .q
            .forward(x)?
            .reshape((b, n, self.heads, dh))?
            .transpose(1, 2)?
            .contiguous()?;
        let src = match &self.reduce {
            Some((conv, norm)) => {
                let map = from_tokens(x, h, w)?;
                norm.forward(&to_tokens(&conv.forward(&map)?)?)?
            }
            None => x.clone(),
        };
        let m = src.dim(1)?;
        let kv = self
            .kv
            .forward(&src)?
            .reshape((b, m, 2, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let k = kv.get(0)?.contiguous()?;
        let v = kv.get(1)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let attn = softmax(&scores, 3)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, self.dim))?;
        self.proj.forward(&out)
    }
}

struct MixFfn {
    fc1: Linear,
    dw: DepthwiseConv3,
    fc2: Linear,
}

impl MixFfn {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.fc1.forward(x)?;
        let y = self.dw.forward(&from_tokens(&y, h, w)?)?.gelu()?;
        self.fc2.forward(&to_tokens(&y)?)
    }
}

struct Block {
    norm1: LayerNorm,
    attn: EfficientAttention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        Ok((&x + self.ffn.forward(&self.norm2.forward(&x)?, h, w)?)?)
    }
}

struct Stage {
    embed: PatchEmbed,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// Encoder and all-MLP decode head.
pub struct SegNet {
    config: SegConfig,
    stages: Vec<Stage>,
    head_proj: Vec<Linear>,
    head_fuse: Linear,
    head_cls: Linear,
}

impl SegNet {
    pub fn new(pb: &ParamBuilder, config: &SegConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = config.in_channels;
        for i in 0..4 {
            let c = config.widths[i];
            let sp = pb.pp(format!("encoder.stage{i}"));
            let spec = if i == 0 {
                ConvSpec {
                    kernel: 7,
                    stride: 4,
                    padding: 3,
                    dilation: 1,
                }
            } else {
                ConvSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    dilation: 1,
                }
            };
            let embed = PatchEmbed {
                proj: Conv2d::new(&sp.pp("embed.proj"), in_ch, c, spec)?,
                norm: LayerNorm::new(&sp.pp("embed.norm"), c)?,
            };
            let mut blocks = Vec::with_capacity(config.depths[i]);
            for j in 0..config.depths[i] {
                let bp = sp.pp(format!("block{j}"));
                let sr = config.sr_ratios[i];
                let reduce = if sr > 1 {
                    Some((
                        Conv2d::new(
                            &bp.pp("attn.sr"),
                            c,
                            c,
                            ConvSpec {
                                kernel: sr,
                                stride: sr,
                                padding: 0,
                                dilation: 1,
                            },
                        )?,
                        LayerNorm::new(&bp.pp("attn.sr_norm"), c)?,
                    ))
                } else {
                    None
                };
                let hidden = c * config.mlp_ratio;
                blocks.push(Block {
                    norm1: LayerNorm::new(&bp.pp("norm1"), c)?,
                    attn: EfficientAttention {
                        q: Linear::new(&bp.pp("attn.q"), c, c)?,
                        kv: Linear::new(&bp.pp("attn.kv"), c, 2 * c)?,
                        proj: Linear::new(&bp.pp("attn.proj"), c, c)?,
                        reduce,
                        heads: config.heads[i],
                        dim: c,
                    },
                    norm2: LayerNorm::new(&bp.pp("norm2"), c)?,
                    ffn: MixFfn {
                        fc1: Linear::new(&bp.pp("ffn.fc1"), c, hidden)?,
                        dw: DepthwiseConv3::new(&bp.pp("ffn.dw"), hidden)?,
                        fc2: Linear::new(&bp.pp("ffn.fc2"), hidden, c)?,
                    },
                });
            }
            stages.push(Stage {
                embed,
                blocks,
                norm: LayerNorm::new(&sp.pp("norm"), c)?,
            });
            in_ch = c;
        }
        let d = config.decoder_width;
        let head_proj = (0..4)
            .map(|i| Linear::new(&pb.pp(format!("decoder.proj{i}")), config.widths[i], d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            stages,
            head_proj,
            head_fuse: Linear::new(&pb.pp("decoder.fuse"), 4 * d, d)?,
            head_cls: Linear::new(&pb.pp("decoder.cls"), d, config.num_classes)?,
        })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    /// Runs the encoder on `(B, in_channels, H, W)` images in `[0, 1]`.
    pub fn encode(&self, image: &Tensor) -> Result<Pyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "segmentation input has {c} channels, expected {}",
                self.config.in_channels
            )));
        }
        let (ph, pw) = (
            h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE,
            w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE,
        );
        let x = reflect_pad_br(image, ph - h, pw - w)?;
        if x.dims4()?.2 != ph || x.dims4()?.3 != pw {
            return Err(Error::shape("padding failed to reach a multiple of 32"));
        }
        let mut x = standardize(&x)?;
        let mut stages = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            let (mut t, sh, sw) = stage.embed.forward(&x)?;
            for block in &stage.blocks {
                t = block.forward(&t, sh, sw)?;
            }
            x = from_tokens(&stage.norm.forward(&t)?, sh, sw)?;
            stages.push(FeatureMap {
                tensor: x.clone(),
                stride: 4 << i,
            });
        }
        Ok(Pyramid {
            stages,
            input_hw: (h, w),
            padded_hw: (ph, pw),
        })
    }

    /// Per-pixel class scores `(B, num_classes, H, W)` at the unpadded input size.
    pub fn decode(&self, pyramid: &Pyramid) -> Result<Tensor> {
        if pyramid.stages.len() != 4 {
            return Err(Error::shape("decoder needs four stages"));
        }
        let (ph, pw) = pyramid.padded_hw;
        let (gh, gw) = (ph / 4, pw / 4);
        let mut parts = Vec::with_capacity(4);
        for (stage, proj) in pyramid.stages.iter().zip(&self.head_proj) {
            let (_, _, h, w) = stage.tensor.dims4()?;
            let t = proj.forward(&to_tokens(&stage.tensor)?)?;
            parts.push(resize_bilinear(&from_tokens(&t, h, w)?, gh, gw)?);
        }
        let cat = to_tokens(&Tensor::cat(&parts, 1)?)?;
        let fused = self.head_fuse.forward(&cat)?.relu()?;
        let logits = from_tokens(&self.head_cls.forward(&fused)?, gh, gw)?;
        let full = resize_bilinear(&logits, ph, pw)?;
        let (h, w) = pyramid.input_hw;
        Ok(full.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(image)?)
    }

    /// First-stage patch embedding weight; a representative encoder parameter.
    pub fn encoder_probe(&self) -> &crate::nn::Param {
        self.stages[0].embed.proj.weight()
    }

    pub fn decoder_probe(&self) -> &crate::nn::Param {
        self.head_fuse.weight()
    }

    pub fn class_head(&self) -> &Linear {
        &self.head_cls
    }
}

/// Projects two encoder stages to a common width and resamples them to the
/// fusion network's working resolution.
pub struct SemanticTaps {
    stages: [usize; 2],
    proj: [Linear; 2],
}

impl SemanticTaps {
    pub fn new(pb: &ParamBuilder, seg: &SegConfig, stages: [usize; 2], tap_channels: usize) -> Result<Self> {
        if stages.iter().any(|&s| s >= 4) || tap_channels == 0 {
            return Err(Error::config("tap stages must be in 0..4 and tap_channels positive"));
        }
        Ok(Self {
            stages,
            proj: [
                Linear::new(&pb.pp("taps.proj0"), seg.widths[stages[0]], tap_channels)?,
                Linear::new(&pb.pp("taps.proj1"), seg.widths[stages[1]], tap_channels)?,
            ],
        })
    }

    /// Two `(B, tap_channels, H, W)` maps aligned with the unpadded input.
    pub fn forward(&self, pyramid: &Pyramid, target_hw: (usize, usize)) -> Result<[FeatureMap; 2]> {
        let (ih, iw) = pyramid.input_hw;
        let (ph, pw) = pyramid.padded_hw;
        let (th, tw) = target_hw;
        // resample the padded grid so the unpadded part covers exactly target_hw
        let (gh, gw) = ((th * ph).div_ceil(ih), (tw * pw).div_ceil(iw));
        let tap = |i: usize| -> Result<FeatureMap> {
            let stage = pyramid
                .stages
                .get(self.stages[i])
                .ok_or_else(|| Error::shape("pyramid lacks a tapped stage"))?;
            let (_, _, h, w) = stage.tensor.dims4()?;
            let t = self.proj[i].forward(&to_tokens(&stage.tensor)?)?;
            let map = resize_bilinear(&from_tokens(&t, h, w)?, gh, gw)?;
            Ok(FeatureMap {
                tensor: map.narrow(2, 0, th)?.narrow(3, 0, tw)?,
                stride: 1,
            })
        };
        Ok([tap(0)?, tap(1)?])
    }
}

/// Per-pixel argmax over the class axis of `(B, K, H, W)` scores.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<Vec<u16>>> {
    let idx = logits.argmax(1)?;
    let (b, _, _) = idx.dims3()?;
    (0..b)
        .map(|i| {
            Ok(idx
                .get(i)?
                .flatten_all()?
                .to_vec1::<u32>()?
                .into_iter()
                .map(|c| c as u16)
                .collect())
        })
        .collect()
}
