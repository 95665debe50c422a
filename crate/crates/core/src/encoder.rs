//! Hierarchical transformer encoder: overlapping patch embedding followed by
//! pre-norm blocks whose keys and values are spatially reduced by a strided
//! convolution.
//!
//! Parameter paths, with `i` in `1..=4` and `j` the block index:
//!
//! ```text
//! stage{i}.patch_embed.{weight,bias}        conv [C_i, C_{i-1}, K_i, K_i]
//! stage{i}.block{j}.norm1.{weight,bias}
//! stage{i}.block{j}.attn.{q,k,v,proj}.{weight,bias}
//! stage{i}.block{j}.attn.sr.{weight,bias}   conv [C_i, C_i, R_i, R_i], only if R_i > 1
//! stage{i}.block{j}.attn.sr_norm.{weight,bias}
//! stage{i}.block{j}.norm2.{weight,bias}
//! stage{i}.block{j}.mlp.{fc1,fc2}.{weight,bias}
//! stage{i}.norm.{weight,bias}
//! ```

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};
use crate::tensor::Scalar;

/// A `[B, N, D]` token sequence that came from an `h x w` map.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

/// Encoder outputs `E1..E4` at 1/4, 1/8, 1/16 and 1/32 of the input.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

pub struct SraOutput {
    pub out: Var,
    /// The attention node; its recorded probabilities are `[B, heads, N, kv_len]`.
    pub attention: Var,
    pub kv_len: usize,
}

pub(crate) fn init_block<T: Scalar>(
    init: &mut Initializer<'_>,
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    ratio: usize,
    mlp_ratio: usize,
) {
    init.norm(store, &format!("{prefix}.norm1"), dim);
    for name in ["q", "k", "v", "proj"] {
        init.linear(store, &format!("{prefix}.attn.{name}"), dim, dim);
    }
    if ratio > 1 {
        init.conv(store, &format!("{prefix}.attn.sr"), dim, dim, ratio);
        init.norm(store, &format!("{prefix}.attn.sr_norm"), dim);
    }
    init.norm(store, &format!("{prefix}.norm2"), dim);
    init.linear(store, &format!("{prefix}.mlp.fc1"), dim, dim * mlp_ratio);
    init.linear(store, &format!("{prefix}.mlp.fc2"), dim * mlp_ratio, dim);
}

pub fn init_encoder<T: Scalar>(cfg: &ModelConfig, init: &mut Initializer<'_>, store: &mut ParamStore<T>) {
    let mut c_in = 3;
    for i in 0..4 {
        let s = i + 1;
        let c = cfg.stage_channels[i];
        init.conv(store, &format!("stage{s}.patch_embed"), c_in, c, cfg.patch_kernels[i]);
        for j in 0..cfg.stage_depths[i] {
            init_block(init, store, &format!("stage{s}.block{j}"), c, cfg.reduction_ratios[i], cfg.mlp_ratio);
        }
        init.norm(store, &format!("stage{s}.norm"), c);
        c_in = c;
    }
}

fn linear<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

pub(crate) fn norm<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b)
}

pub(crate) fn conv<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}

/// Overlapping strided convolution of stage `stage` (1-based), flattened to
/// tokens. `x` is a `[B, C, H, W]` map.
pub fn patch_embed<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, cfg: &ModelConfig, stage: usize) -> Result<Tokens> {
    if !(1..=4).contains(&stage) {
        return Err(Error::Shape(format!("patch_embed: stage {stage} out of range")));
    }
    let i = stage - 1;
    let shape = tape.shape(x).to_vec();
    let s = cfg.patch_strides[i];
    if shape.len() != 4 || shape[2] % s != 0 || shape[3] % s != 0 {
        return Err(Error::Shape(format!("patch_embed: stage {stage} input {shape:?} not divisible by stride {s}")));
    }
    let map = conv(tape, x, &format!("stage{stage}.patch_embed"), s, cfg.patch_paddings[i])?;
    let (h, w) = (tape.shape(map)[2], tape.shape(map)[3]);
    debug_assert_eq!((h, w), (shape[2] / s, shape[3] / s));
    let var = tape.map_to_tokens(map)?;
    Ok(Tokens { var, h, w })
}

/// Multi-head attention whose keys and values come from the token map
/// reduced by a `ratio x ratio` stride-`ratio` convolution (skipped when
/// `ratio == 1`). Output shape equals input shape.
pub fn sra_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    tokens: &Tokens,
    ratio: usize,
    heads: usize,
    prefix: &str,
) -> Result<SraOutput> {
    if ratio == 0 || tokens.h % ratio != 0 || tokens.w % ratio != 0 {
        return Err(Error::Shape(format!(
            "sra_attention: reduction ratio {ratio} does not divide {}x{}",
            tokens.h, tokens.w
        )));
    }
    let x = tokens.var;
    let q = linear(tape, x, &format!("{prefix}.q"))?;
    let kv_src = if ratio > 1 {
        let map = tape.tokens_to_map(x, tokens.h, tokens.w)?;
        let reduced = conv(tape, map, &format!("{prefix}.sr"), ratio, 0)?;
        let t = tape.map_to_tokens(reduced)?;
        norm(tape, t, &format!("{prefix}.sr_norm"))?
    } else {
        x
    };
    let kv_len = tape.shape(kv_src)[1];
    let k = linear(tape, kv_src, &format!("{prefix}.k"))?;
    let v = linear(tape, kv_src, &format!("{prefix}.v"))?;
    let attention = tape.attention(q, k, v, heads)?;
    let out = linear(tape, attention, &format!("{prefix}.proj"))?;
    Ok(SraOutput { out, attention, kv_len })
}

/// `x + attn(norm1(x))`, then `y + mlp(norm2(y))`.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<'_, T>,
    tokens: &Tokens,
    ratio: usize,
    heads: usize,
    prefix: &str,
) -> Result<Tokens> {
    let n1 = norm(tape, tokens.var, &format!("{prefix}.norm1"))?;
    let attn = sra_attention(tape, &Tokens { var: n1, ..*tokens }, ratio, heads, &format!("{prefix}.attn"))?;
    let y = tape.add(tokens.var, attn.out)?;
    let n2 = norm(tape, y, &format!("{prefix}.norm2"))?;
    let h1 = linear(tape, n2, &format!("{prefix}.mlp.fc1"))?;
    let h1 = tape.gelu(h1);
    let h2 = linear(tape, h1, &format!("{prefix}.mlp.fc2"))?;
    let var = tape.add(y, h2)?;
    Ok(Tokens { var, ..*tokens })
}

/// Runs one encoder stage on a `[B, C, H, W]` map and returns the stage
/// output map.
pub fn encoder_stage<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, cfg: &ModelConfig, stage: usize) -> Result<Var> {
    let i = stage - 1;
    let mut tokens = patch_embed(tape, x, cfg, stage)?;
    for j in 0..cfg.stage_depths[i] {
        tokens = transformer_block(
            tape,
            &tokens,
            cfg.reduction_ratios[i],
            cfg.stage_heads[i],
            &format!("stage{stage}.block{j}"),
        )?;
    }
    let normed = norm(tape, tokens.var, &format!("stage{stage}.norm"))?;
    tape.tokens_to_map(normed, tokens.h, tokens.w)
}

/// `[B, 3, H, W]` image to the four-level pyramid.
pub fn encoder_forward<T: Scalar>(tape: &mut Tape<'_, T>, image: Var, cfg: &ModelConfig) -> Result<FeaturePyramid> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!("encoder expects [B, 3, H, W], got {shape:?}")));
    }
    let problems = cfg.encoder_violations(shape[2], shape[3]);
    if !problems.is_empty() {
        return Err(Error::Shape(problems.join("; ")));
    }
    let mut x = image;
    let mut levels = [image; 4];
    for (i, level) in levels.iter_mut().enumerate() {
        x = encoder_stage(tape, x, cfg, i + 1)?;
        *level = x;
    }
    Ok(FeaturePyramid { levels })
}
