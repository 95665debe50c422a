//! Decoders turning the encoder pyramid into the map read by the bin heads.
//!
//! The iterative decoder starts at 1/32 and works upward: at each level the
//! coarser result is doubled by a 2x2 stride-2 transposed convolution,
//! concatenated with the encoder skip and fused by a 3x3 convolution. A last
//! upsample and convolution bring the result to half resolution.
//!
//! Paths: `decoder.level4.conv`, `decoder.level{1,2,3}.{up,conv}`,
//! `decoder.out.{up,conv}`; the all-MLP variant uses `decoder.proj{1..4}` and
//! `decoder.fuse`.

use crate::autograd::{Tape, Var};
use crate::config::{DecoderKind, ModelConfig};
use crate::encoder::{conv, FeaturePyramid};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};
use crate::tensor::Scalar;

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn init_decoder<T: Scalar>(cfg: &ModelConfig, init: &mut Initializer<'_>, store: &mut ParamStore<T>) {
    let c = cfg.decoder_channels;
    match cfg.decoder_kind {
        DecoderKind::IterativeFusion => {
            init.conv(store, "decoder.level4.conv", cfg.stage_channels[3], c, 3);
            for lvl in (1..=3).rev() {
                init.conv_transpose(store, &format!("decoder.level{lvl}.up"), c, c, 2);
                init.conv(store, &format!("decoder.level{lvl}.conv"), c + cfg.stage_channels[lvl - 1], c, 3);
            }
            init.conv_transpose(store, "decoder.out.up", c, c, 2);
            init.conv(store, "decoder.out.conv", c, c, 3);
        }
        DecoderKind::AllMlp => {
            for lvl in 1..=4 {
                init.conv(store, &format!("decoder.proj{lvl}"), cfg.stage_channels[lvl - 1], c, 1);
            }
            init.conv(store, "decoder.fuse", 4 * c, c, 1);
        }
    }
}

fn upsample<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    tape.conv_transpose(x, w, Some(b))
}

/// `Conv3x3(Concat(Up(d_above), e_skip))` with a leaky-ReLU, for level
/// `level` in `1..=3`.
pub fn fuse_step<T: Scalar>(tape: &mut Tape<'_, T>, d_above: Var, e_skip: Var, level: usize) -> Result<Var> {
    let (da, es) = (tape.shape(d_above).to_vec(), tape.shape(e_skip).to_vec());
    if da.len() != 4 || es.len() != 4 || es[2] != 2 * da[2] || es[3] != 2 * da[3] || es[0] != da[0] {
        return Err(Error::Shape(format!("fuse_step: skip {es:?} is not twice the spatial size of {da:?}")));
    }
    let up = upsample(tape, d_above, &format!("decoder.level{level}.up"))?;
    let cat = tape.concat_channels(up, e_skip)?;
    let fused = conv(tape, cat, &format!("decoder.level{level}.conv"), 1, 1)?;
    Ok(tape.leaky_relu(fused, T::from_f64(LEAKY_SLOPE)))
}

/// Intermediate maps of the iterative decoder, coarsest first, plus the
/// half-resolution output.
pub struct DecoderTrace {
    pub levels: [Var; 4],
    pub f_out: Var,
}

pub fn decoder_forward_traced<T: Scalar>(tape: &mut Tape<'_, T>, pyramid: &FeaturePyramid) -> Result<DecoderTrace> {
    let [e1, e2, e3, e4] = pyramid.levels;
    let d4 = conv(tape, e4, "decoder.level4.conv", 1, 1)?;
    let d4 = tape.leaky_relu(d4, T::from_f64(LEAKY_SLOPE));
    let d3 = fuse_step(tape, d4, e3, 3)?;
    let d2 = fuse_step(tape, d3, e2, 2)?;
    let d1 = fuse_step(tape, d2, e1, 1)?;
    let up = upsample(tape, d1, "decoder.out.up")?;
    let f_out = conv(tape, up, "decoder.out.conv", 1, 1)?;
    Ok(DecoderTrace { levels: [d4, d3, d2, d1], f_out })
}

/// Iterative fusion decoder; output is `[B, C, H/2, W/2]`.
pub fn decoder_forward<T: Scalar>(tape: &mut Tape<'_, T>, pyramid: &FeaturePyramid) -> Result<Var> {
    Ok(decoder_forward_traced(tape, pyramid)?.f_out)
}

/// All-MLP baseline: per-level 1x1 projection to `C`, bilinear resampling
/// to the 1/4 grid, concatenation and a 1x1 fusion; output `[B, C, H/4, W/4]`.
pub fn all_mlp_decoder_forward<T: Scalar>(tape: &mut Tape<'_, T>, pyramid: &FeaturePyramid) -> Result<Var> {
    let s1 = tape.shape(pyramid.levels[0]).to_vec();
    let (h, w) = (s1[2], s1[3]);
    let mut cat: Option<Var> = None;
    for (i, &e) in pyramid.levels.iter().enumerate() {
        let p = conv(tape, e, &format!("decoder.proj{}", i + 1), 1, 0)?;
        let p = if tape.shape(p)[2..] == [h, w] { p } else { tape.resize_bilinear(p, h, w)? };
        cat = Some(match cat {
            None => p,
            Some(acc) => tape.concat_channels(acc, p)?,
        });
    }
    let cat = cat.expect("four levels");
    conv(tape, cat, "decoder.fuse", 1, 0)
}

pub fn decode<T: Scalar>(tape: &mut Tape<'_, T>, pyramid: &FeaturePyramid, cfg: &ModelConfig) -> Result<Var> {
    match cfg.decoder_kind {
        DecoderKind::IterativeFusion => decoder_forward(tape, pyramid),
        DecoderKind::AllMlp => all_mlp_decoder_forward(tape, pyramid),
    }
}
