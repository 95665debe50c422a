//! Running a trained model over samples and scoring the predictions.

use crate::config::ModelConfig;
use crate::data::{batch, Sample};
use crate::error::Result;
use crate::metrics::{aggregate, compute_metrics, EvalCrop, MetricReport};
use crate::model::predict;
use crate::params::ParamStore;

/// How ground truth is masked before scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub crop: CropRule,
    /// Overrides the depth maps' own cap when set.
    pub cap: Option<f64>,
    /// Images per forward pass.
    pub chunk: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CropRule {
    #[default]
    None,
    Garg,
    Eigen,
}

impl std::str::FromStr for CropRule {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CropRule::None),
            "garg" => Ok(CropRule::Garg),
            "eigen" => Ok(CropRule::Eigen),
            other => Err(crate::Error::Config(vec![format!("unknown crop `{other}` (expected garg, eigen or none)")])),
        }
    }
}

impl CropRule {
    pub fn for_size(self, h: usize, w: usize) -> Result<EvalCrop> {
        match self {
            CropRule::None => Ok(EvalCrop::full(h, w)),
            CropRule::Garg => Ok(crate::metrics::garg_crop(h, w)),
            CropRule::Eigen => crate::metrics::eigen_crop_for(h, w),
        }
    }
}

pub struct Evaluation {
    pub per_image: Vec<(String, MetricReport)>,
    pub aggregate: MetricReport,
}

pub fn evaluate(params: &ParamStore<f32>, cfg: &ModelConfig, samples: &[Sample], opts: &EvalOptions) -> Result<Evaluation> {
    let mut per_image = Vec::with_capacity(samples.len());
    for group in samples.chunks(opts.chunk.max(1)) {
        let b = batch(group)?;
        let pred = predict(params, cfg, &b.images)?;
        let hw = group[0].height() * group[0].width();
        for (i, s) in group.iter().enumerate() {
            let (h, w) = (s.height(), s.width());
            let depth = match opts.cap {
                Some(c) => s.depth.with_cap(c),
                None => s.depth.clone(),
            };
            let mut mask = depth.valid().to_vec();
            opts.crop.for_size(h, w)?.apply(&mut mask, h, w)?;
            let p: Vec<f64> = pred.depth.data()[i * hw..(i + 1) * hw].iter().map(|&v| v as f64).collect();
            per_image.push((s.source_id.clone(), compute_metrics(&p, depth.data(), &mask)?));
        }
    }
    let reports: Vec<MetricReport> = per_image.iter().map(|(_, r)| *r).collect();
    Ok(Evaluation { aggregate: aggregate(&reports)?, per_image })
}
