//! Pre-norm ViT classifier with a CLS token.
//!
//! The forward pass is written once against [`Ops`] and runs on both the
//! autodiff tape and the shape tracer. Nothing in it depends on the sequence
//! length, so any keep set is accepted without changes to the network.

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{is_no_decay, BlockParams, Params, ViTParams};

use crate::error::{Error, Result};
use crate::numerics::{Ops, Tape, Tensor};
use crate::sampler::{self, KeepRate, KeepSet, SamplingSpec, Strategy};
use crate::tokenizer::{self, grid_dims, ImageBatch, TokenBatch};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("patch", self.patch),
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("classes", self.classes),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        grid_dims(self.image_h, self.image_w, self.patch)?;
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    /// Full patch count N.
    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn parameter_count(&self) -> usize {
        Params::<Vec<usize>>::shapes(self)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// DeiT-family sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tiny, Variant::Small, Variant::Base, Variant::Large];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Large => "large",
        }
    }

    /// `(depth, width, heads)`
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Variant::Tiny => (12, 192, 3),
            Variant::Small => (12, 384, 6),
            Variant::Base => (12, 768, 12),
            Variant::Large => (24, 1024, 16),
        }
    }

    /// RGB config with 1000 classes.
    pub fn config(self, image: usize, patch: usize) -> ModelConfig {
        let (depth, width, heads) = self.dims();
        ModelConfig {
            depth,
            width,
            heads,
            patch,
            image_h: image,
            image_w: image,
            channels: 3,
            classes: 1000,
            mlp_ratio: 4,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// Patch embedding with positions and CLS; no dropout yet.
pub fn embed<O: Ops>(
    ops: &mut O,
    cfg: &ModelConfig,
    p: &Params<O::Var>,
    patches: &O::Var,
) -> Result<TokenBatch<O::Var>> {
    tokenizer::embed_tokens(ops, patches, &p.patch_proj, &p.pos, &p.cls, cfg.grid())
}

/// Multi-head self-attention with output projection on `x[B,T,d]`.
pub fn attention<O: Ops>(
    ops: &mut O,
    x: &O::Var,
    blk: &BlockParams<O::Var>,
    heads: usize,
) -> Result<O::Var> {
    let s = ops.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    if d % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let project = |ops: &mut O, w: &O::Var, bias: &O::Var| -> Result<O::Var> {
        let y = ops.matmul(x, w)?;
        let y = ops.add(&y, bias)?;
        let y = ops.reshape(&y, &[b, t, heads, dh])?;
        ops.swap_axes12(&y)
    };
    let q = project(ops, &blk.q_w, &blk.q_b)?;
    let k = project(ops, &blk.k_w, &blk.k_b)?;
    let v = project(ops, &blk.v_w, &blk.v_b)?;
    let kt = ops.transpose(&k)?;
    let scores = ops.matmul(&q, &kt)?;
    let scores = ops.scale(&scores, 1.0 / (dh as f64).sqrt());
    let weights = ops.softmax(&scores, 3)?;
    let mixed = ops.matmul(&weights, &v)?;
    let mixed = ops.swap_axes12(&mixed)?;
    let mixed = ops.reshape(&mixed, &[b, t, d])?;
    let out = ops.matmul(&mixed, &blk.proj_w)?;
    ops.add(&out, &blk.proj_b)
}

fn mlp<O: Ops>(ops: &mut O, x: &O::Var, blk: &BlockParams<O::Var>) -> Result<O::Var> {
    let h = ops.matmul(x, &blk.fc1_w)?;
    let h = ops.add(&h, &blk.fc1_b)?;
    let h = ops.gelu(&h);
    let h = ops.matmul(&h, &blk.fc2_w)?;
    ops.add(&h, &blk.fc2_b)
}

/// Transformer blocks, final norm on the CLS slot, linear head -> `[B,K]` logits.
pub fn forward<O: Ops>(
    ops: &mut O,
    cfg: &ModelConfig,
    p: &Params<O::Var>,
    tokens: &TokenBatch<O::Var>,
) -> Result<O::Var> {
    if !tokens.has_cls {
        return Err(Error::MissingCls);
    }
    let s = ops.shape(&tokens.tokens).to_vec();
    if s.len() != 3 || s[2] != cfg.width {
        return Err(Error::shape(
            "forward",
            format!("tokens {s:?} for width {}", cfg.width),
        ));
    }
    let batch = s[0];
    let mut x = tokens.tokens.clone();
    for blk in &p.blocks {
        let h = ops.layer_norm(&x, &blk.ln1_g, &blk.ln1_b, LN_EPS)?;
        let a = attention(ops, &h, blk, cfg.heads)?;
        x = ops.add(&x, &a)?;
        let h = ops.layer_norm(&x, &blk.ln2_g, &blk.ln2_b, LN_EPS)?;
        let m = mlp(ops, &h, blk)?;
        x = ops.add(&x, &m)?;
    }
    let cls = ops.gather_rows(&x, &[vec![0]])?;
    let cls = ops.reshape(&cls, &[batch, cfg.width])?;
    let cls = ops.layer_norm(&cls, &p.norm_g, &p.norm_b, LN_EPS)?;
    let logits = ops.matmul(&cls, &p.head_w)?;
    ops.add(&logits, &p.head_b)
}

/// Test-time patch dropout, used only by robustness evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalDropout {
    pub rate: f64,
    pub seed: u64,
    /// Distinguishes successive evaluation batches.
    pub step: u64,
}

/// Class probabilities `[B,K]`. Without `eval_drop` every patch is used;
/// otherwise each image gets its own random keep set at that rate.
pub fn predict(
    params: &ViTParams,
    images: &ImageBatch,
    eval_drop: Option<EvalDropout>,
) -> Result<Tensor> {
    let cfg = params.config;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let patches = tokenizer::patchify(images, cfg.patch)?;
    let patches = tape.leaf(patches, false);
    let mut tokens = embed(&mut tape, &cfg, &pv, &patches)?;
    if let Some(drop) = eval_drop {
        let (rows, cols) = cfg.grid();
        let spec = SamplingSpec::new(
            Strategy::Random,
            KeepRate::Point(drop.rate),
            drop.seed,
            rows,
            cols,
        )?;
        if drop.rate < 1.0 {
            let keep = sampler::draw_batch(&spec, drop.step, images.batch())?;
            tokens = sampler::apply_dropout(&mut tape, tokens, &keep)?;
        }
    }
    let logits = forward(&mut tape, &cfg, &pv, &tokens)?;
    let probs = tape.softmax(&logits, 1)?;
    Ok(tape.value(probs).clone())
}

/// Logits on the tape for a given keep set (or all tokens). Shared by the
/// training loop and the tests.
pub fn logits_with_keep(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pv: &Params<crate::numerics::Var>,
    images: &ImageBatch,
    keep: Option<&[KeepSet]>,
) -> Result<(crate::numerics::Var, usize)> {
    let patches = tokenizer::patchify(images, cfg.patch)?;
    let patches = tape.leaf(patches, false);
    let mut tokens = embed(tape, cfg, pv, &patches)?;
    if let Some(keep) = keep {
        tokens = sampler::apply_dropout(tape, tokens, keep)?;
    }
    let seq_len = tokens.seq_len();
    Ok((forward(tape, cfg, pv, &tokens)?, seq_len))
}

#[cfg(test)]
mod tests;
