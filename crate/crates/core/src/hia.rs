//! Hierarchical interactive attention between modality and semantic features.
//!
//! Each source feature map is flattened to `mn × C` tokens and split by two
//! linear embeddings into a semantic-kind and a modality-kind token matrix.
//! Attention is linear in the token count: every head first condenses its
//! keys and values into a `C_h × C_h` global context `G = (1/mn)·KᵀV`, then
//! queries read from it (`S = Q·G`).
//!
//! * SoAM: the semantic query `Q_s` reads the modality contexts `G_ir`, `G_vis`.
//! * MoAM: the modality queries `Q_ir`, `Q_vis` read the semantic context `G_s`.
//!
//! Per modality, `[S_x, M_x]` goes through a two-layer MLP whose last layer
//! starts at zero, and is added back onto the input feature map.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{from_tokens, softmax, sum_sq, to_tokens};
use crate::nn::{Init, Linear, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlpActivation {
    #[default]
    Gelu,
    /// Leaves the MLP linear; used to probe the bilinear structure.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HiaConfig {
    /// Token width `C`.
    pub channels: usize,
    pub heads: usize,
    /// Normalize keys with a softmax over tokens instead of the `1/mn` scale.
    pub key_softmax: bool,
    /// Also embed the token kinds the attention equations never read.
    pub compute_unused_tokens: bool,
    pub activation: MlpActivation,
    /// Start the output layer of both MLPs at zero, making the block an identity.
    pub zero_init_output: bool,
}

impl Default for HiaConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            key_softmax: false,
            compute_unused_tokens: false,
            activation: MlpActivation::Gelu,
            zero_init_output: true,
        }
    }
}

impl HiaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "HIA channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

/// Which source a token matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Ir,
    Vis,
    Seg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Semantic,
    Modality,
}

/// `(B, mn, C)` tokens with their provenance.
#[derive(Debug, Clone)]
pub struct TokenMatrix {
    pub tokens: Tensor,
    pub origin: Origin,
    pub kind: TokenKind,
}

/// The semantic/modality channel embedding of one source.
pub struct TokenEmbed {
    semantic: Linear,
    modality: Linear,
    origin: Origin,
}

impl TokenEmbed {
    pub fn new(pb: &ParamBuilder, in_channels: usize, channels: usize, origin: Origin) -> Result<Self> {
        Ok(Self {
            semantic: Linear::new(&pb.pp("semantic"), in_channels, channels)?,
            modality: Linear::new(&pb.pp("modality"), in_channels, channels)?,
            origin,
        })
    }

    /// Flattens `(B, C_in, h, w)` and returns `(semantic, modality)` tokens.
    pub fn forward(&self, feature: &Tensor) -> Result<(TokenMatrix, TokenMatrix)> {
        let flat = to_tokens(feature)?;
        Ok((self.semantic_tokens(&flat)?, self.modality_tokens(&flat)?))
    }

    fn semantic_tokens(&self, flat: &Tensor) -> Result<TokenMatrix> {
        Ok(TokenMatrix {
            tokens: self.semantic.forward(flat)?,
            origin: self.origin,
            kind: TokenKind::Semantic,
        })
    }

    fn modality_tokens(&self, flat: &Tensor) -> Result<TokenMatrix> {
        Ok(TokenMatrix {
            tokens: self.modality.forward(flat)?,
            origin: self.origin,
            kind: TokenKind::Modality,
        })
    }
}

fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    if c % heads != 0 {
        return Err(Error::shape(format!("{c} channels do not split into {heads} heads")));
    }
    Ok(t.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(t: &Tensor) -> Result<Tensor> {
    let (b, h, n, ch) = t.dims4()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, n, h * ch))?)
}

/// Per-head global context `(B, h, C_h, C_h)`: `(1/mn)·K_hᵀ V_h`, or
/// `softmax_tokens(K_h)ᵀ V_h` when `key_softmax` is set.
pub fn global_context(k: &Tensor, v: &Tensor, heads: usize, key_softmax: bool) -> Result<Tensor> {
    if k.dims() != v.dims() {
        return Err(Error::shape(format!(
            "key {:?} and value {:?} differ",
            k.dims(),
            v.dims()
        )));
    }
    let n = k.dim(1)?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    if key_softmax {
        let kh = softmax(&kh, 2)?;
        Ok(kh.t()?.matmul(&vh)?)
    } else {
        Ok((kh.t()?.matmul(&vh)? / n as f64)?)
    }
}

/// `Q_h · G_h` for every head, merged back to `(B, mn, C)`.
pub fn attend(q: &Tensor, context: &Tensor) -> Result<Tensor> {
    let heads = context.dim(1)?;
    let qh = split_heads(q, heads)?;
    merge_heads(&qh.matmul(context)?)
}

struct Qkv {
    q: Linear,
    k: Linear,
    v: Linear,
}

impl Qkv {
    fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&pb.pp("q"), c, c)?,
            k: Linear::new(&pb.pp("k"), c, c)?,
            v: Linear::new(&pb.pp("v"), c, c)?,
        })
    }
}

struct Mlp {
    fc1: Linear,
    fc2: Linear,
    activation: MlpActivation,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.fc1.forward(x)?;
        let y = match self.activation {
            MlpActivation::Gelu => y.gelu()?,
            MlpActivation::Identity => y,
        };
        self.fc2.forward(&y)
    }
}

/// Intermediate products of one block, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct HiaTrace {
    pub s_ir: Tensor,
    pub s_vis: Tensor,
    pub m_ir: Tensor,
    pub m_vis: Tensor,
    pub unused_tokens: Vec<TokenMatrix>,
    pub heads: usize,
}

impl HiaTrace {
    /// Frobenius norm of each head's slice of `S_ir, S_vis, M_ir, M_vis`,
    /// summed over the batch.
    pub fn head_norms(&self) -> Result<[Vec<f64>; 4]> {
        let norms = |t: &Tensor| -> Result<Vec<f64>> {
            let h = split_heads(t, self.heads)?;
            (0..self.heads)
                .map(|i| Ok(sum_sq(&h.narrow(1, i, 1)?)?.sqrt()))
                .collect()
        };
        Ok([
            norms(&self.s_ir)?,
            norms(&self.s_vis)?,
            norms(&self.m_ir)?,
            norms(&self.m_vis)?,
        ])
    }
}

pub struct HiaBlock {
    config: HiaConfig,
    embed_ir: TokenEmbed,
    embed_vis: TokenEmbed,
    embed_seg: TokenEmbed,
    seg: Qkv,
    ir: Qkv,
    vis: Qkv,
    mlp_ir: Mlp,
    mlp_vis: Mlp,
    in_channels: usize,
}

impl HiaBlock {
    /// `modality_channels` is the width of the fusion features, `seg_channels`
    /// the width of the semantic tap.
    pub fn new(pb: &ParamBuilder, config: &HiaConfig, modality_channels: usize, seg_channels: usize) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let out_init = if config.zero_init_output {
            Init::Zeros
        } else {
            Init::FanIn(c)
        };
        let mlp = |name: &str| -> Result<Mlp> {
            Ok(Mlp {
                fc1: Linear::new(&pb.pp(format!("{name}.fc1")), 2 * c, c)?,
                fc2: Linear::with_init(&pb.pp(format!("{name}.fc2")), c, modality_channels, out_init, true)?,
                activation: config.activation,
            })
        };
        Ok(Self {
            config: config.clone(),
            embed_ir: TokenEmbed::new(&pb.pp("embed_ir"), modality_channels, c, Origin::Ir)?,
            embed_vis: TokenEmbed::new(&pb.pp("embed_vis"), modality_channels, c, Origin::Vis)?,
            embed_seg: TokenEmbed::new(&pb.pp("embed_seg"), seg_channels, c, Origin::Seg)?,
            seg: Qkv::new(&pb.pp("seg"), c)?,
            ir: Qkv::new(&pb.pp("ir"), c)?,
            vis: Qkv::new(&pb.pp("vis"), c)?,
            mlp_ir: mlp("mlp_ir")?,
            mlp_vis: mlp("mlp_vis")?,
            in_channels: modality_channels,
        })
    }

    fn check(&self, a: &TokenMatrix, b: &TokenMatrix, c: &TokenMatrix) -> Result<()> {
        if a.tokens.dims() != b.tokens.dims() || a.tokens.dims() != c.tokens.dims() {
            return Err(Error::shape("token matrices differ in shape"));
        }
        Ok(())
    }

    fn context(&self, qkv: &Qkv, tokens: &Tensor) -> Result<Tensor> {
        let k = qkv.k.forward(tokens)?;
        let v = qkv.v.forward(tokens)?;
        global_context(&k, &v, self.config.heads, self.config.key_softmax)
    }

    /// Semantic-oriented attention: `(S_ir, S_vis) = (Q_s·G_ir, Q_s·G_vis)`.
    pub fn soam(&self, seg_s: &TokenMatrix, ir_m: &TokenMatrix, vis_m: &TokenMatrix) -> Result<(Tensor, Tensor)> {
        self.check(seg_s, ir_m, vis_m)?;
        let q_s = self.seg.q.forward(&seg_s.tokens)?;
        let g_ir = self.context(&self.ir, &ir_m.tokens)?;
        let g_vis = self.context(&self.vis, &vis_m.tokens)?;
        Ok((attend(&q_s, &g_ir)?, attend(&q_s, &g_vis)?))
    }

    /// Modality-oriented attention: `(M_ir, M_vis) = (Q_ir·G_s, Q_vis·G_s)`.
    pub fn moam(&self, seg_s: &TokenMatrix, ir_m: &TokenMatrix, vis_m: &TokenMatrix) -> Result<(Tensor, Tensor)> {
        self.check(seg_s, ir_m, vis_m)?;
        let g_s = self.context(&self.seg, &seg_s.tokens)?;
        let q_ir = self.ir.q.forward(&ir_m.tokens)?;
        let q_vis = self.vis.q.forward(&vis_m.tokens)?;
        Ok((attend(&q_ir, &g_s)?, attend(&q_vis, &g_s)?))
    }

    /// Residual branch contributions `(ΔF_ir, ΔF_vis)` at the input resolution.
    pub fn branches(&self, f_ir: &Tensor, f_vis: &Tensor, f_seg: &Tensor) -> Result<(Tensor, Tensor, HiaTrace)> {
        let (b, c, h, w) = f_ir.dims4()?;
        if f_vis.dims4()? != (b, c, h, w) {
            return Err(Error::shape("infrared and visible features differ in shape"));
        }
        let (sb, _, sh, sw) = f_seg.dims4()?;
        if (sb, sh, sw) != (b, h, w) {
            return Err(Error::shape("semantic tap does not match the modality features"));
        }
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "expected {} feature channels, got {c}",
                self.in_channels
            )));
        }
        let ir_flat = to_tokens(f_ir)?;
        let vis_flat = to_tokens(f_vis)?;
        let seg_flat = to_tokens(f_seg)?;
        let ir_m = self.embed_ir.modality_tokens(&ir_flat)?;
        let vis_m = self.embed_vis.modality_tokens(&vis_flat)?;
        let seg_s = self.embed_seg.semantic_tokens(&seg_flat)?;
        let unused_tokens = if self.config.compute_unused_tokens {
            vec![
                self.embed_ir.semantic_tokens(&ir_flat)?,
                self.embed_vis.semantic_tokens(&vis_flat)?,
                self.embed_seg.modality_tokens(&seg_flat)?,
            ]
        } else {
            Vec::new()
        };

        let (s_ir, s_vis) = self.soam(&seg_s, &ir_m, &vis_m)?;
        let (m_ir, m_vis) = self.moam(&seg_s, &ir_m, &vis_m)?;
        let d_ir = self.mlp_ir.forward(&Tensor::cat(&[&s_ir, &m_ir], D::Minus1)?)?;
        let d_vis = self.mlp_vis.forward(&Tensor::cat(&[&s_vis, &m_vis], D::Minus1)?)?;
        let trace = HiaTrace {
            s_ir,
            s_vis,
            m_ir,
            m_vis,
            unused_tokens,
            heads: self.config.heads,
        };
        Ok((from_tokens(&d_ir, h, w)?, from_tokens(&d_vis, h, w)?, trace))
    }

    /// Refined `(F_ir', F_vis')` = inputs plus their attention branches.
    pub fn forward(&self, f_ir: &Tensor, f_vis: &Tensor, f_seg: &Tensor) -> Result<(Tensor, Tensor, HiaTrace)> {
        let (d_ir, d_vis, trace) = self.branches(f_ir, f_vis, f_seg)?;
        Ok(((f_ir + d_ir)?, (f_vis + d_vis)?, trace))
    }

    pub fn embed_seg(&self) -> &TokenEmbed {
        &self.embed_seg
    }

    /// Query projection of the semantic source (a sampled "HIA projection" weight).
    pub fn seg_query(&self) -> &Linear {
        &self.seg.q
    }

    pub fn ir_mlp_output(&self) -> &Linear {
        &self.mlp_ir.fc2
    }
}
