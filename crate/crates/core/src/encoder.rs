//! Patch-wise transformer encoder and the anatomy/characteristic split.
//!
//! One output row per patch (no class token), learned 1-D positional
//! embeddings, pre-norm blocks with GELU MLPs and a final layer norm.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamSet};
use crate::patch::{patchify_var, PatchGeometry};
use crate::tensor::{Graph, Real, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Synthesizer hidden dimension `V` for embedding width `L`: the anatomy
/// half must reshape to `C×PS×V`, so `L/2 = C·PS·V`.
pub fn derive_hidden_dim(embed_dim: usize, channels: usize, patch: usize) -> Result<usize> {
    let denom = 2 * channels * patch;
    if denom == 0 || embed_dim == 0 || embed_dim % denom != 0 {
        return Err(Error::Config(format!(
            "embedding dim {embed_dim} is not usable: each half ({}) must equal \
             C·PS·V = {channels}·{patch}·V for a positive integer V",
            embed_dim as f64 / 2.0
        )));
    }
    Ok(embed_dim / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Base,
    Deep,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Base => "base",
            Arch::Deep => "deep",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Arch::Base),
            "deep" => Ok(Arch::Deep),
            other => Err(Error::Config(format!("unknown architecture `{other}` (base|deep)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// 3×32×32 images, 4×4 patches, L=96 (V=4), 4 blocks of 4 heads.
    pub fn toy() -> Self {
        EncoderConfig {
            channels: 3,
            image_size: 32,
            patch_size: 4,
            embed_dim: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    /// Twice as deep and 1.5× wider; L=144 gives V=6. L=128 would leave
    /// 64 = 3·4·V without an integer solution.
    pub fn deep() -> Self {
        EncoderConfig { embed_dim: 144, depth: 8, ..Self::toy() }
    }

    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::Base => Self::toy(),
            Arch::Deep => Self::deep(),
        }
    }

    /// ViT-B/16 geometry at 224×224 (L=768, V=8).
    pub fn vit_b16() -> Self {
        EncoderConfig {
            channels: 3,
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
        }
    }

    /// ViT-L/16 widened to L=1056 so that V=11 is integral.
    pub fn vit_l16_widened() -> Self {
        EncoderConfig { embed_dim: 1056, depth: 24, heads: 16, ..Self::vit_b16() }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, heads and mlp ratio must be positive".into()));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} must be even to split into two halves",
                self.embed_dim
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        derive_hidden_dim(self.embed_dim, self.channels, self.patch_size)?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.channels, self.image_size, self.image_size, self.patch_size)
    }

    pub fn hidden_dim(&self) -> usize {
        derive_hidden_dim(self.embed_dim, self.channels, self.patch_size).expect("validated config")
    }

    pub fn half(&self) -> usize {
        self.embed_dim / 2
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// `key=value` pairs, as echoed into checkpoints and run directories.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("channels", self.channels.to_string()),
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden_dim", self.hidden_dim().to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
        ]
    }

    pub fn from_pairs(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            get(k)
                .ok_or_else(|| Error::Config(format!("missing `{k}`")))?
                .parse()
                .map_err(|_| Error::Config(format!("`{k}` is not an integer")))
        };
        let cfg = EncoderConfig {
            channels: num("channels")?,
            image_size: num("image_size")?,
            patch_size: num("patch_size")?,
            embed_dim: num("embed_dim")?,
            depth: num("depth")?,
            heads: num("heads")?,
            mlp_ratio: num("mlp_ratio")?,
        };
        cfg.validate()?;
        if let Some(v) = get("hidden_dim") {
            if v != cfg.hidden_dim().to_string() {
                return Err(Error::Config(format!(
                    "hidden_dim {v} inconsistent with embed_dim {}",
                    cfg.embed_dim
                )));
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    pos_embed: usize,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// The encoder `E`: patch tokens → per-patch embeddings of width `L`.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: ParamSet<T>,
    layout: Layout,
}

/// Embeddings `z` (`B×P×L`) with their anatomy (`[0, L/2)`) and
/// characteristic (`[L/2, L)`) halves.
pub struct PatchEmbeddings<'g, T: Real> {
    pub z: Var<'g, T>,
    pub anatomy: Var<'g, T>,
    pub characteristic: Var<'g, T>,
}

impl<'g, T: Real> PatchEmbeddings<'g, T> {
    pub fn from_z(z: Var<'g, T>) -> Result<Self> {
        let l = *z.shape().last().expect("rank ≥ 1");
        if l % 2 != 0 {
            return Err(Error::Shape(format!("cannot split odd embedding width {l}")));
        }
        Ok(PatchEmbeddings {
            z,
            anatomy: z.narrow(-1, 0, l / 2)?,
            characteristic: z.narrow(-1, l / 2, l / 2)?,
        })
    }
}

/// Column bisection of `…×L` embeddings into `(anatomy, characteristic)`.
pub fn split<T: Real>(z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let l = *z.shape().last().expect("rank ≥ 1");
    if l % 2 != 0 {
        return Err(Error::Shape(format!("cannot split odd embedding width {l}")));
    }
    let h = l / 2;
    let mut shape = z.shape().to_vec();
    *shape.last_mut().unwrap() = h;
    let (mut a, mut c) = (Vec::with_capacity(z.len() / 2), Vec::with_capacity(z.len() / 2));
    for row in z.data().chunks(l) {
        a.extend_from_slice(&row[..h]);
        c.extend_from_slice(&row[h..]);
    }
    Ok((Tensor::new(&shape, a)?, Tensor::new(&shape, c)?))
}

impl<T: Real> Encoder<T> {
    /// Fresh weights: N(0, 0.02) matrices and positional embeddings, zero
    /// biases, unit layer-norm gains.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (l, hidden) = (config.embed_dim, config.embed_dim * config.mlp_ratio);
        let mut params = ParamSet::new();
        let patch_embed = Linear::init(&mut params, "patch_embed", config.patch_len(), l, INIT_STD, rng);
        let pos_embed = params.push_normal("pos_embed", &[config.num_patches(), l], INIT_STD, rng);
        let blocks = (0..config.depth)
            .map(|b| {
                let name = |s: &str| format!("blocks.{b}.{s}");
                Block {
                    norm1: LayerNorm::init(&mut params, &name("norm1"), l),
                    qkv: Linear::init(&mut params, &name("attn.qkv"), l, 3 * l, INIT_STD, rng),
                    proj: Linear::init(&mut params, &name("attn.proj"), l, l, INIT_STD, rng),
                    norm2: LayerNorm::init(&mut params, &name("norm2"), l),
                    fc1: Linear::init(&mut params, &name("mlp.fc1"), l, hidden, INIT_STD, rng),
                    fc2: Linear::init(&mut params, &name("mlp.fc2"), hidden, l, INIT_STD, rng),
                }
            })
            .collect();
        let norm = LayerNorm::init(&mut params, "norm", l);
        Ok(Encoder { config, params, layout: Layout { patch_embed, pos_embed, blocks, norm } })
    }

    /// Rebuild from stored parameters; names and shapes must match `config`.
    pub fn from_params(config: EncoderConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut enc = Self::new(config, &mut crate::rng::stream(0, crate::rng::Stream::Init))?;
        enc.params.assign(params)?;
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder { config: self.config, params: self.params.cast(), layout: self.layout.clone() }
    }

    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        self.params.bind(graph, trainable)
    }

    /// Encode `B×P×(C·PS·PS)` patch tokens into `B×P×L` embeddings.
    pub fn encode_tokens<'g>(&self, p: &Bound<'g, T>, tokens: Var<'g, T>) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let shape = tokens.shape();
        if shape.len() != 3 || shape[1] != cfg.num_patches() || shape[2] != cfg.patch_len() {
            return Err(Error::Geometry(format!(
                "patch tokens {shape:?} do not match [B, {}, {}]",
                cfg.num_patches(),
                cfg.patch_len()
            )));
        }
        let (b, np, l, h) = (shape[0], cfg.num_patches(), cfg.embed_dim, cfg.heads);
        let dh = l / h;
        let att_scale = T::lit(1.0 / (dh as f64).sqrt());

        let mut x = self.layout.patch_embed.forward(p, tokens)?.add(p.var(self.layout.pos_embed))?;
        for blk in &self.layout.blocks {
            let n = blk.norm1.forward(p, x)?;
            let qkv = blk
                .qkv
                .forward(p, n)?
                .reshape(&[b, np, 3, h, dh])?
                .permute(&[2, 0, 3, 1, 4])?;
            let q = qkv.narrow(0, 0, 1)?.reshape(&[b * h, np, dh])?.scale(att_scale);
            let k = qkv.narrow(0, 1, 1)?.reshape(&[b * h, np, dh])?;
            let v = qkv.narrow(0, 2, 1)?.reshape(&[b * h, np, dh])?;
            let att = q.matmul_t(k, false, true)?.softmax(-1)?;
            let ctx = att
                .matmul(v)?
                .reshape(&[b, h, np, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b, np, l])?;
            x = x.add(blk.proj.forward(p, ctx)?)?;
            let n = blk.norm2.forward(p, x)?;
            let m = blk.fc2.forward(p, blk.fc1.forward(p, n)?.gelu())?;
            x = x.add(m)?;
        }
        self.layout.norm.forward(p, x)
    }

    /// Encode `B×C×H×W` images.
    pub fn encode<'g>(&self, p: &Bound<'g, T>, images: Var<'g, T>) -> Result<PatchEmbeddings<'g, T>> {
        let geom = self.config.geometry()?;
        let tokens = patchify_var(images, &geom)?;
        PatchEmbeddings::from_z(self.encode_tokens(p, tokens)?)
    }

    /// Frozen forward pass: `B×C×H×W` (or `C×H×W`) → `B×P×L` (or `P×L`).
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let unbatched = images.rank() == 3;
        let images = if unbatched {
            let mut s = vec![1];
            s.extend_from_slice(images.shape());
            images.clone().reshape(&s)?
        } else {
            images.clone()
        };
        let g = Graph::new();
        let p = self.bind(&g, false);
        let z = self.encode(&p, g.constant(images))?.z.value();
        if unbatched {
            let s = z.shape()[1..].to_vec();
            z.reshape(&s)
        } else {
            Ok(z)
        }
    }
}
