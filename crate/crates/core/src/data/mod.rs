//! Depth maps, image/depth samples, training crops, batching and dataset
//! sources (manifests of files or the synthetic scene generator).

mod io;
mod synth;

use std::path::{Path, PathBuf};

use rand::Rng;

pub use io::{
    colorize, load_depth_png, load_kitti_depth_png, load_rgb, read_pfm, write_depth_png, write_kitti_depth_png,
    write_pfm, write_preview_png, write_rgb_png, DepthEncoding,
};
pub use synth::{synth_scene, synthetic_dataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Metric depth with a validity mask. Invalid entries hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
    cap: f64,
}

impl DepthMap {
    /// Values that are not finite, not positive or above `cap` become invalid.
    pub fn from_values(h: usize, w: usize, values: Vec<f64>, cap: f64) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Shape(format!("depth map {h}x{w} given {} values", values.len())));
        }
        let valid: Vec<bool> = values.iter().map(|&v| v.is_finite() && v > 0.0 && v <= cap).collect();
        let data = values.iter().zip(&valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
        Ok(Self { h, w, data, valid, cap })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// The same depths under a tighter or looser cap.
    pub fn with_cap(&self, cap: f64) -> Self {
        let values = self.data.iter().zip(&self.valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
        Self::from_values(self.h, self.w, values, cap).expect("same size")
    }

    fn window(&self, top: usize, left: usize, ch: usize, cw: usize, flip: bool) -> Self {
        let mut data = Vec::with_capacity(ch * cw);
        let mut valid = Vec::with_capacity(ch * cw);
        for r in top..top + ch {
            let row = r * self.w;
            for c in 0..cw {
                let src = if flip { left + cw - 1 - c } else { left + c };
                data.push(self.data[row + src]);
                valid.push(self.valid[row + src]);
            }
        }
        Self { h: ch, w: cw, data, valid, cap: self.cap }
    }
}

/// An RGB image in `[0, 1]` (`[3, H, W]`) with aligned depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub depth: DepthMap,
    pub source_id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, depth: DepthMap, source_id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != depth.h || s[2] != depth.w {
            return Err(Error::Shape(format!("image {s:?} does not match depth {}x{}", depth.h, depth.w)));
        }
        Ok(Self { image, depth, source_id: source_id.into() })
    }

    pub fn height(&self) -> usize {
        self.depth.h
    }

    pub fn width(&self) -> usize {
        self.depth.w
    }
}

/// The `ch x cw` window at (`top`, `left`), mirrored left-right if `flip`.
pub fn crop_at(sample: &Sample, top: usize, left: usize, ch: usize, cw: usize, flip: bool) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::Shape(format!("crop {ch}x{cw} at ({top}, {left}) does not fit a {h}x{w} sample")));
    }
    let mut img = Vec::with_capacity(3 * ch * cw);
    let src = sample.image.data();
    for plane in 0..3 {
        for r in top..top + ch {
            let row = (plane * h + r) * w;
            for c in 0..cw {
                let col = if flip { left + cw - 1 - c } else { left + c };
                img.push(src[row + col]);
            }
        }
    }
    Ok(Sample {
        image: Tensor::from_vec(&[3, ch, cw], img)?,
        depth: sample.depth.window(top, left, ch, cw, flip),
        source_id: sample.source_id.clone(),
    })
}

/// Uniform random window of `ch x cw`; with `allow_flip` the result is
/// mirrored with probability one half.
pub fn random_crop_pair<R: Rng + ?Sized>(
    sample: &Sample,
    ch: usize,
    cw: usize,
    allow_flip: bool,
    rng: &mut R,
) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if ch > h || cw > w {
        return Err(Error::Shape(format!("crop {ch}x{cw} is larger than the {h}x{w} sample")));
    }
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let flip = allow_flip && rng.random_bool(0.5);
    crop_at(sample, top, left, ch, cw, flip)
}

/// Same-size samples stacked for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 3, H, W]`
    pub images: Tensor<f32>,
    pub depths: Vec<DepthMap>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    /// Depths of every image flattened in batch order.
    pub fn gt(&self) -> Vec<f64> {
        self.depths.iter().flat_map(|d| d.data.iter().copied()).collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.depths.iter().flat_map(|d| d.valid.iter().copied()).collect()
    }
}

pub fn batch(samples: &[Sample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Shape("cannot batch zero samples".into()));
    }
    let images = samples
        .iter()
        .map(|s| {
            let sh = s.image.shape();
            s.image.clone().reshape(&[1, sh[0], sh[1], sh[2]])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        images: Tensor::stack_batch(&images)?,
        depths: samples.iter().map(|s| s.depth.clone()).collect(),
        ids: samples.iter().map(|s| s.source_id.clone()).collect(),
    })
}

pub fn unbatch(b: Batch) -> Vec<Sample> {
    let Batch { images, depths, ids } = b;
    depths
        .into_iter()
        .zip(ids)
        .enumerate()
        .map(|(i, (depth, source_id))| {
            let image = images.batch_item(i);
            let shape = image.shape()[1..].to_vec();
            Sample { image: image.reshape(&shape).expect("same length"), depth, source_id }
        })
        .collect()
}

/// `image<TAB>depth` pairs; relative paths resolve against the manifest's
/// directory. Blank lines are skipped.
pub fn parse_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(img), Some(dep), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("{}:{}: expected `image<TAB>depth`", path.display(), n + 1)));
        };
        out.push((base.join(img.trim()), base.join(dep.trim())));
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: manifest lists no samples", path.display())));
    }
    Ok(out)
}

/// Loads every pair of a manifest into memory, in manifest order.
pub fn load_manifest(path: &Path, encoding: DepthEncoding) -> Result<Vec<Sample>> {
    parse_manifest(path)?
        .into_iter()
        .map(|(img, dep)| {
            let image = load_rgb(&img)?;
            let depth = load_depth_png(&dep, encoding)?;
            Sample::new(image, depth, img.display().to_string())
        })
        .collect()
}
