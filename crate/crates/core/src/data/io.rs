use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb, RgbImage};

use super::DepthMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 16-bit PNG depth conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthEncoding {
    /// `raw / 256` metres, capped at 80 m.
    Kitti,
    /// `raw / 1000` metres, capped at 10 m.
    Nyu,
}

impl DepthEncoding {
    pub fn scale(self) -> f64 {
        match self {
            DepthEncoding::Kitti => 256.0,
            DepthEncoding::Nyu => 1000.0,
        }
    }

    pub fn cap(self) -> f64 {
        match self {
            DepthEncoding::Kitti => 80.0,
            DepthEncoding::Nyu => 10.0,
        }
    }
}

impl std::str::FromStr for DepthEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" => Ok(DepthEncoding::Kitti),
            "nyu" => Ok(DepthEncoding::Nyu),
            other => Err(Error::Config(vec![format!("unknown depth encoding `{other}` (expected `kitti` or `nyu`)")])),
        }
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_depth_png(path: &Path, encoding: DepthEncoding) -> Result<DepthMap> {
    let DynamicImage::ImageLuma16(buf) = decode(path)? else {
        return Err(Error::Format(format!("{}: depth PNG must be 16-bit single channel", path.display())));
    };
    let (w, h) = buf.dimensions();
    let scale = encoding.scale();
    let values = buf.into_raw().into_iter().map(|raw| raw as f64 / scale).collect();
    DepthMap::from_values(h as usize, w as usize, values, encoding.cap())
}

pub fn load_kitti_depth_png(path: &Path) -> Result<DepthMap> {
    load_depth_png(path, DepthEncoding::Kitti)
}

/// Invalid pixels are written as 0; valid depths are rounded to the
/// nearest raw step.
pub fn write_depth_png(path: &Path, depth: &DepthMap, encoding: DepthEncoding) -> Result<()> {
    let scale = encoding.scale();
    let raw: Vec<u16> = depth
        .data()
        .iter()
        .zip(depth.valid())
        .map(|(&v, &ok)| if ok { (v * scale).round().clamp(0.0, u16::MAX as f64) as u16 } else { 0 })
        .collect();
    let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(depth.width() as u32, depth.height() as u32, raw)
        .expect("buffer matches dimensions");
    save(path, DynamicImage::ImageLuma16(buf))
}

pub fn write_kitti_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    write_depth_png(path, depth, DepthEncoding::Kitti)
}

/// Any colour or grey PNG as `[3, H, W]` in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = decode(path)?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.into_raw();
    let mut planes = vec![0.0f32; 3 * h * w];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c * h * w + i] = rgb[c].clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[3, h, w], planes)
}

pub fn write_rgb_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        *px = Rgb(std::array::from_fn(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    save(path, DynamicImage::ImageRgb8(out))
}

/// Single-channel little-endian PFM, rows stored bottom to top.
pub fn write_pfm(path: &Path, h: usize, w: usize, values: &[f32]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Shape(format!("pfm {h}x{w} given {} values", values.len())));
    }
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in values.chunks(w).rev() {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Returns `(h, w, values)` in top-to-bottom row order.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        header.extend(line.split_whitespace().map(str::to_string));
    }
    if header[0] != "Pf" {
        return Err(bad("only single-channel `Pf` files are supported"));
    }
    let w: usize = header[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = header[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = header[3].parse().map_err(|_| bad("bad scale"))?;
    let mut raw = vec![0u8; 4 * h * w];
    r.read_exact(&mut raw).map_err(|_| bad("truncated pixel data"))?;
    let words = raw.chunks_exact(4).map(|b| {
        let b = [b[0], b[1], b[2], b[3]];
        if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    });
    let bottom_up: Vec<f32> = words.collect();
    let values = bottom_up.chunks(w.max(1)).rev().flatten().copied().collect();
    Ok((h, w, values))
}

const STOPS: [[f32; 3]; 5] =
    [[0.05, 0.03, 0.20], [0.42, 0.10, 0.50], [0.85, 0.27, 0.30], [0.98, 0.62, 0.15], [0.99, 0.95, 0.60]];

/// Near is bright, far is dark.
pub fn colorize(values: &[f64], h: usize, w: usize, lo: f64, hi: f64) -> RgbImage {
    let mut img = RgbImage::new(w as u32, h as u32);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for (px, &v) in img.pixels_mut().zip(values) {
        let t = (1.0 - ((v - lo) / span).clamp(0.0, 1.0)) as f32 * (STOPS.len() - 1) as f32;
        let i = (t.floor() as usize).min(STOPS.len() - 2);
        let f = t - i as f32;
        *px = Rgb(std::array::from_fn(|c| ((STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f) * 255.0).round() as u8));
    }
    img
}

pub fn write_preview_png(path: &Path, values: &[f64], h: usize, w: usize, lo: f64, hi: f64) -> Result<()> {
    save(path, DynamicImage::ImageRgb8(colorize(values, h, w, lo, hi)))
}
