//! Adaptive bin head: per-image bin widths, per-pixel bin probabilities and
//! the depth composed from them.
//!
//! Paths: `head.transbins.patch_embed`, `head.transbins.block{j}.*`,
//! `head.transbins.readout.{fc1,fc2}`, `head.gap.{fc1,fc2}` and `head.prob`.

use crate::autograd::{Tape, Var};
use crate::config::{HeadKind, ModelConfig};
use crate::encoder::{conv, init_block, transformer_block, Tokens};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};
use crate::tensor::Scalar;

/// Added to every raw width before normalization.
pub const WIDTH_EPS: f64 = 1e-3;
const HIDDEN_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct BinPartition {
    pub widths: Vec<f64>,
    pub centers: Vec<f64>,
    pub d_min: f64,
    pub d_max: f64,
}

impl BinPartition {
    /// Problems with the partition, empty when it is well formed.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.widths.len() != self.centers.len() || self.widths.is_empty() {
            out.push("widths and centers must be non-empty and of equal length".to_string());
            return out;
        }
        if self.widths.iter().any(|&w| !(w > 0.0)) {
            out.push("non-positive width".to_string());
        }
        let sum: f64 = self.widths.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            out.push(format!("widths sum to {sum}"));
        }
        if self.centers.windows(2).any(|p| !(p[0] < p[1])) {
            out.push("centers not strictly increasing".to_string());
        }
        if !(self.d_min < self.centers[0] && *self.centers.last().unwrap() < self.d_max) {
            out.push("centers leave (d_min, d_max)".to_string());
        }
        out
    }
}

pub fn init_head<T: Scalar>(cfg: &ModelConfig, init: &mut Initializer<'_>, store: &mut ParamStore<T>) {
    let c = cfg.decoder_channels;
    match cfg.head_kind {
        HeadKind::Transbins => {
            let e = cfg.transbins_dim;
            init.conv(store, "head.transbins.patch_embed", c, e, cfg.transbins_patch);
            for j in 0..cfg.transbins_layers {
                init_block(init, store, &format!("head.transbins.block{j}"), e, 1, cfg.mlp_ratio);
            }
            init.linear(store, "head.transbins.readout.fc1", e, 2 * e);
            init.linear(store, "head.transbins.readout.fc2", 2 * e, cfg.n_bins);
        }
        HeadKind::Gap => {
            init.linear(store, "head.gap.fc1", c, 2 * c);
            init.linear(store, "head.gap.fc2", 2 * c, cfg.n_bins);
        }
    }
    init.conv(store, "head.prob", c, cfg.n_bins, 1);
}

fn mlp<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w1 = tape.param(&format!("{prefix}.fc1.weight"))?;
    let b1 = tape.param(&format!("{prefix}.fc1.bias"))?;
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.leaky_relu(h, T::from_f64(HIDDEN_SLOPE));
    let w2 = tape.param(&format!("{prefix}.fc2.weight"))?;
    let b2 = tape.param(&format!("{prefix}.fc2.bias"))?;
    let out = tape.linear(h, w2, Some(b2))?;
    Ok(tape.relu(out))
}

/// Token sequence the width transformer produces before readout.
pub fn transbins_tokens<T: Scalar>(tape: &mut Tape<'_, T>, f_out: Var, cfg: &ModelConfig) -> Result<Tokens> {
    let shape = tape.shape(f_out).to_vec();
    let p = cfg.transbins_patch;
    if shape.len() != 4 || p == 0 || shape[2] % p != 0 || shape[3] % p != 0 {
        return Err(Error::Shape(format!("transbins: feature map {shape:?} not divisible by patch size {p}")));
    }
    let map = conv(tape, f_out, "head.transbins.patch_embed", p, 0)?;
    let (h, w) = (shape[2] / p, shape[3] / p);
    let mut tokens = Tokens { var: tape.map_to_tokens(map)?, h, w };
    for j in 0..cfg.transbins_layers {
        tokens = transformer_block(tape, &tokens, 1, cfg.transbins_heads, &format!("head.transbins.block{j}"))?;
    }
    Ok(tokens)
}

/// Raw non-negative widths `[B, n_bins]` read from the first token.
pub fn transbins_widths<T: Scalar>(tape: &mut Tape<'_, T>, f_out: Var, cfg: &ModelConfig) -> Result<Var> {
    let tokens = transbins_tokens(tape, f_out, cfg)?;
    let first = tape.select_token(tokens.var, 0)?;
    mlp(tape, first, "head.transbins.readout")
}

/// Raw non-negative widths from the spatial mean of `f_out`.
pub fn gap_widths<T: Scalar>(tape: &mut Tape<'_, T>, f_out: Var) -> Result<Var> {
    let pooled = tape.spatial_mean(f_out)?;
    mlp(tape, pooled, "head.gap")
}

pub fn raw_widths<T: Scalar>(tape: &mut Tape<'_, T>, f_out: Var, cfg: &ModelConfig) -> Result<Var> {
    match cfg.head_kind {
        HeadKind::Transbins => transbins_widths(tape, f_out, cfg),
        HeadKind::Gap => gap_widths(tape, f_out),
    }
}

/// `(b + eps) / Σ(b + eps)`.
pub fn normalize_widths(raw: &[f64], eps: f64) -> Result<Vec<f64>> {
    if let Some(bad) = raw.iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::invalid("normalize_widths", format!("raw width {bad} is negative")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("normalize_widths", format!("eps {eps} must be positive")));
    }
    let total: f64 = raw.iter().map(|v| v + eps).sum();
    Ok(raw.iter().map(|v| (v + eps) / total).collect())
}

pub fn bin_centers(widths: &[f64], d_min: f64, d_max: f64) -> BinPartition {
    let span = d_max - d_min;
    let mut acc = 0.0;
    let centers = widths
        .iter()
        .map(|&w| {
            let c = d_min + span * (w / 2.0 + acc);
            acc += w;
            c
        })
        .collect();
    BinPartition { widths: widths.to_vec(), centers, d_min, d_max }
}

/// 1x1 convolution to `n_bins` logits and a softmax over bins.
pub fn prob_head<T: Scalar>(tape: &mut Tape<'_, T>, f_out: Var) -> Result<Var> {
    let logits = conv(tape, f_out, "head.prob", 1, 0)?;
    tape.softmax_channels(logits)
}

/// Probability-weighted centre sum, bilinearly resampled to the full
/// resolution. `centers` is `[B, n_bins]`.
pub fn compose_depth<T: Scalar>(
    tape: &mut Tape<'_, T>,
    probs: Var,
    centers: Var,
    full_h: usize,
    full_w: usize,
) -> Result<Var> {
    let half = tape.weighted_sum_channels(probs, centers)?;
    if tape.shape(half)[2..] == [full_h, full_w] {
        return Ok(half);
    }
    tape.resize_bilinear(half, full_h, full_w)
}
