//! Depth evaluation metrics and the standard evaluation crops.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

/// Half-open pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalCrop {
    pub row_lo: usize,
    pub row_hi: usize,
    pub col_lo: usize,
    pub col_hi: usize,
}

impl EvalCrop {
    pub fn full(h: usize, w: usize) -> Self {
        Self { row_lo: 0, row_hi: h, col_lo: 0, col_hi: w }
    }

    pub fn height(&self) -> usize {
        self.row_hi - self.row_lo
    }

    pub fn width(&self) -> usize {
        self.col_hi - self.col_lo
    }

    /// Clears every mask entry of an `h x w` map outside the crop.
    pub fn apply(&self, mask: &mut [bool], h: usize, w: usize) -> Result<()> {
        if mask.len() != h * w || self.row_hi > h || self.col_hi > w || self.row_lo >= self.row_hi || self.col_lo >= self.col_hi
        {
            return Err(Error::Shape(format!("crop {self:?} does not fit a {h}x{w} map")));
        }
        for (r, row) in mask.chunks_mut(w).enumerate() {
            let inside_row = (self.row_lo..self.row_hi).contains(&r);
            for (c, m) in row.iter_mut().enumerate() {
                *m &= inside_row && (self.col_lo..self.col_hi).contains(&c);
            }
        }
        Ok(())
    }
}

const GARG: [f64; 4] = [0.408_108_11, 0.991_891_89, 0.035_947_71, 0.964_052_29];

pub fn garg_crop(h: usize, w: usize) -> EvalCrop {
    let f = |frac: f64, n: usize| (frac * n as f64).floor() as usize;
    EvalCrop { row_lo: f(GARG[0], h), row_hi: f(GARG[1], h), col_lo: f(GARG[2], w), col_hi: f(GARG[3], w) }
}

pub const NYU_SIZE: (usize, usize) = (480, 640);

pub fn eigen_crop_nyu() -> EvalCrop {
    EvalCrop { row_lo: 45, row_hi: 471, col_lo: 41, col_hi: 601 }
}

/// The NYU crop, refusing maps that are not 480x640.
pub fn eigen_crop_for(h: usize, w: usize) -> Result<EvalCrop> {
    if (h, w) != NYU_SIZE {
        return Err(Error::Shape(format!("the Eigen NYU crop needs a 480x640 map, got {h}x{w}")));
    }
    Ok(eigen_crop_nyu())
}

/// RMSE, mean relative error and the three threshold accuracies over the
/// masked pixels of one image. Thresholds are strict: `max ratio < 1.25^i`.
pub fn compute_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricReport> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::Shape(format!("metrics: lengths {}, {}, {}", pred.len(), gt.len(), mask.len())));
    }
    let thresholds = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
    let (mut n, mut se, mut rel) = (0usize, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        let (d, t) = (pred[i], gt[i]);
        if !(d > 0.0) || !(t > 0.0) {
            return Err(Error::Domain(format!("metrics: nonpositive depth at pixel {i}")));
        }
        let diff = d - t;
        se += diff * diff;
        rel += diff.abs() / t;
        let ratio = (d / t).max(t / d);
        for (h, &thr) in hits.iter_mut().zip(&thresholds) {
            *h += (ratio < thr) as usize;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok(MetricReport {
        rmse: (se / nf).sqrt(),
        rel: rel / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        n_pixels: n,
    })
}

/// Equal-weight mean over images; `n_pixels` is the total.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        rmse: mean(|r| r.rmse),
        rel: mean(|r| r.rel),
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
    })
}
