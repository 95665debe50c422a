//! The full network: encoder, decoder and bin head wired together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::{decode, init_decoder};
use crate::encoder::{encoder_forward, init_encoder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::head::{compose_depth, init_head, prob_head, raw_widths, BinPartition, WIDTH_EPS};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Freshly initialized parameters for `cfg`; a pure function of `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(&mut rng);
    let mut store = ParamStore::new();
    init_encoder(cfg, &mut init, &mut store);
    init_decoder(cfg, &mut init, &mut store);
    init_head(cfg, &mut init, &mut store);
    store
}

/// Handles into the tape for every quantity the losses and tools read.
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub f_out: Var,
    pub raw_widths: Var,
    pub widths: Var,
    /// `[B, n_bins]`
    pub centers: Var,
    /// `[B, n_bins, h, w]` at the head resolution.
    pub probs: Var,
    /// `[B, 1, H, W]`
    pub depth: Var,
}

pub fn forward<T: Scalar>(tape: &mut Tape<'_, T>, image: Var, cfg: &ModelConfig) -> Result<ForwardOutput> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("model expects [B, 3, H, W], got {shape:?}")));
    }
    let problems = cfg.violations(shape[2], shape[3]);
    if !problems.is_empty() {
        return Err(Error::Shape(problems.join("; ")));
    }
    let pyramid = encoder_forward(tape, image, cfg)?;
    let f_out = decode(tape, &pyramid, cfg)?;
    let raw = raw_widths(tape, f_out, cfg)?;
    let widths = tape.normalize_rows(raw, T::from_f64(WIDTH_EPS))?;
    let centers = tape.bin_centers(widths, T::from_f64(cfg.d_min), T::from_f64(cfg.d_max))?;
    let probs = prob_head(tape, f_out)?;
    let depth = compose_depth(tape, probs, centers, shape[2], shape[3])?;
    Ok(ForwardOutput { pyramid, f_out, raw_widths: raw, widths, centers, probs, depth })
}

/// Depth and per-image bin partitions for a `[B, 3, H, W]` batch.
#[derive(Debug)]
pub struct Prediction {
    pub depth: Tensor<f32>,
    pub bins: Vec<BinPartition>,
}

pub fn predict(params: &ParamStore<f32>, cfg: &ModelConfig, image: &Tensor<f32>) -> Result<Prediction> {
    let mut tape = Tape::with_params(params);
    let x = tape.constant(image.clone());
    let out = forward(&mut tape, x, cfg)?;
    let k = cfg.n_bins;
    let widths = tape.value(out.widths).data();
    let centers = tape.value(out.centers).data();
    let bins = widths
        .chunks(k)
        .zip(centers.chunks(k))
        .map(|(w, c)| BinPartition {
            widths: w.iter().map(|&v| v as f64).collect(),
            centers: c.iter().map(|&v| v as f64).collect(),
            d_min: cfg.d_min,
            d_max: cfg.d_max,
        })
        .collect();
    Ok(Prediction { depth: tape.value(out.depth).clone(), bins })
}
