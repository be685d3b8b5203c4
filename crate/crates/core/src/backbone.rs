//! Pre-norm transformer encoder and the weight-shared (siamese) decoder.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::graph::Var;
use crate::nn::{Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Multi-head self-attention followed by a GELU MLP, both pre-normed and
/// residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm_1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm_2: LayerNorm,
    pub fc_1: Linear,
    pub fc_2: Linear,
    pub heads: usize,
    pub width: usize,
}

pub const MLP_RATIO: usize = 4;

impl Block {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(invalid(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            norm_1: LayerNorm::new(store, &format!("{name}.norm_1"), width),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, rng),
            norm_2: LayerNorm::new(store, &format!("{name}.norm_2"), width),
            fc_1: Linear::new(store, &format!("{name}.fc_1"), width, MLP_RATIO * width, rng),
            fc_2: Linear::new(store, &format!("{name}.fc_2"), MLP_RATIO * width, width, rng),
            heads,
            width,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm_1.forward(ctx, x)?;
        let a = self.attention(ctx, h)?;
        let x = ctx.graph.add(x, a)?;
        let h = self.norm_2.forward(ctx, x)?;
        let h = self.fc_1.forward(ctx, h)?;
        let h = ctx.graph.gelu(h);
        let h = self.fc_2.forward(ctx, h)?;
        ctx.graph.add(x, h)
    }

    fn attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(ctx, x)?;
        let head_dim = self.width / self.heads;
        let scale = T::one() / T::from_usize_lossy(head_dim).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * head_dim;
            let q = ctx.graph.slice_cols(qkv, off, off + head_dim)?;
            let k = ctx.graph.slice_cols(qkv, self.width + off, self.width + off + head_dim)?;
            let v = ctx.graph.slice_cols(qkv, 2 * self.width + off, 2 * self.width + off + head_dim)?;
            let s = ctx.graph.matmul_t(q, k, false, true)?;
            let s = ctx.graph.scale(s, scale);
            let p = ctx.graph.softmax(s);
            outs.push(ctx.graph.matmul(p, v)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { ctx.graph.concat_cols(&outs)? };
        self.proj.forward(ctx, o)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm_1.params();
        p.extend(self.qkv.params());
        p.extend(self.proj.params());
        p.extend(self.norm_2.params());
        p.extend(self.fc_1.params());
        p.extend(self.fc_2.params());
        p
    }
}

/// Stack of blocks; positions are added once at the input.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub width: usize,
    pub heads: usize,
}

impl EncoderStack {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, depth: usize, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if depth == 0 {
            return Err(invalid("encoder needs at least one block"));
        }
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), width, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            width,
            heads,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Raw outputs of the requested blocks (0-based). The last block's output
    /// is always included.
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, tokens: Var, pos: Var, collect: &[usize]) -> Result<BTreeMap<usize, Var>> {
        if let Some(&bad) = collect.iter().find(|&&l| l >= self.depth()) {
            return Err(invalid(format!("hidden layer {bad} out of range for {} blocks", self.depth())));
        }
        let mut x = ctx.graph.add(tokens, pos)?;
        let mut out = BTreeMap::new();
        let last = self.depth() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(ctx, x)?;
            if i == last || collect.contains(&i) {
                out.insert(i, x);
            }
        }
        Ok(out)
    }

    /// Final block output passed through the encoder's output norm.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, tokens: Var, pos: Var) -> Result<Var> {
        let layers = self.encode(ctx, tokens, pos, &[])?;
        let last = layers[&(self.depth() - 1)];
        self.norm.forward(ctx, last)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.blocks.iter().flat_map(Block::params).collect();
        p.extend(self.norm.params());
        p
    }
}

/// Decoder blocks with positions re-added before every block. A single
/// instance is called by both reconstruction branches.
#[derive(Clone, Debug)]
pub struct SiameseDecoder {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl SiameseDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, depth: usize, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), width, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
        })
    }

    pub fn decode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, tokens: Var, pos: Var) -> Result<Var> {
        let mut x = tokens;
        for block in &self.blocks {
            let xin = ctx.graph.add(x, pos)?;
            x = block.forward(ctx, xin)?;
        }
        self.norm.forward(ctx, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.blocks.iter().flat_map(Block::params).collect();
        p.extend(self.norm.params());
        p
    }
}
