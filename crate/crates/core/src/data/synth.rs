//! Procedural scenes: a ground plane running to a back wall, with a few
//! tilted rectangles and ellipses in front, lit by a light at the camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DepthMap, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NOISE_STD: f64 = 0.01;

struct Shape {
    uc: f64,
    vc: f64,
    a: f64,
    b: f64,
    ellipse: bool,
    z0: f64,
    gx: f64,
    gy: f64,
    albedo: [f64; 3],
}

impl Shape {
    fn depth_at(&self, u: f64, v: f64) -> Option<f64> {
        let (du, dv) = ((u - self.uc) / self.a, (v - self.vc) / self.b);
        let inside = if self.ellipse { du * du + dv * dv <= 1.0 } else { du.abs() <= 1.0 && dv.abs() <= 1.0 };
        let z = self.z0 + self.gx * (u - self.uc) + self.gy * (v - self.vc);
        (inside && z > 0.0).then_some(z)
    }
}

/// A deterministic scene for `seed`. Every depth is valid and lies in
/// `[d_min + 0.1, d_max - 0.1]`.
pub fn synth_scene(seed: u64, h: usize, w: usize, d_min: f64, d_max: f64) -> Result<Sample> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!("synthetic scenes need sides divisible by 32, got {h}x{w}")));
    }
    let (lo, hi) = (d_min + 0.1, d_max - 0.1);
    if !(lo < hi) {
        return Err(Error::Config(vec![format!("depth range [{d_min}, {d_max}] too narrow for a scene")]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (w as f64, h as f64);
    let focal = wf;
    let (cx, cy) = (wf / 2.0, hf / 2.0);

    let horizon = rng.random_range(0.35..0.5) * hf;
    let cam_height = rng.random_range(0.1..0.16) * hi;
    let wall = rng.random_range(0.6..0.95) * hi;
    let ground_albedo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.45..0.9));
    let wall_albedo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.45..0.9));
    let checker = rng.random_range(0.4..1.2) * cam_height;

    let n_shapes = rng.random_range(3..=6);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let z0 = rng.random_range((0.12 * hi).max(lo)..0.75 * wall);
            Shape {
                uc: rng.random_range(0.0..wf),
                vc: rng.random_range(0.1 * hf..0.9 * hf),
                a: rng.random_range(0.08..0.3) * wf,
                b: rng.random_range(0.08..0.3) * hf,
                ellipse: rng.random_bool(0.5),
                z0,
                gx: rng.random_range(-0.3..0.3) * z0 / wf,
                gy: rng.random_range(-0.3..0.3) * z0 / hf,
                albedo: std::array::from_fn(|_| rng.random_range(0.25..1.0)),
            }
        })
        .collect();

    let mut depth = vec![0.0; h * w];
    let mut albedo = vec![[0.0; 3]; h * w];
    for v in 0..h {
        for u in 0..w {
            let (uf, vf) = (u as f64 + 0.5, v as f64 + 0.5);
            let below = vf - horizon;
            let mut z = wall;
            let mut alb = wall_albedo;
            if below > 0.0 {
                let zg = focal * cam_height / below;
                if zg < wall {
                    z = zg;
                    // checkerboard on the floor, in world coordinates
                    let x = (uf - cx) / focal * zg;
                    let parity = ((x / checker).floor() + (zg / checker).floor()) as i64 & 1;
                    let k = if parity == 0 { 1.0 } else { 0.7 };
                    alb = ground_albedo.map(|c| c * k);
                }
            } else {
                let stripe = if ((uf / wf * 6.0).floor() as i64) & 1 == 0 { 1.0 } else { 0.85 };
                alb = wall_albedo.map(|c| c * stripe);
            }
            for s in &shapes {
                if let Some(zs) = s.depth_at(uf, vf) {
                    if zs < z {
                        z = zs;
                        alb = s.albedo;
                    }
                }
            }
            depth[v * w + u] = z.clamp(lo, hi);
            albedo[v * w + u] = alb;
        }
    }

    let point = |u: usize, v: usize| {
        let z = depth[v * w + u];
        [(u as f64 + 0.5 - cx) / focal * z, (v as f64 + 0.5 - cy) / focal * z, z]
    };
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut image = vec![0.0f32; 3 * h * w];
    for v in 0..h {
        for u in 0..w {
            let p = point(u, v);
            let du = sub(point((u + 1).min(w - 1), v), point(u.saturating_sub(1), v));
            let dv = sub(point(u, (v + 1).min(h - 1)), point(u, v.saturating_sub(1)));
            let mut n = [du[1] * dv[2] - du[2] * dv[1], du[2] * dv[0] - du[0] * dv[2], du[0] * dv[1] - du[1] * dv[0]];
            let plen = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let to_light = [-p[0] / plen, -p[1] / plen, -p[2] / plen];
            let nlen = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-12);
            n = n.map(|c| c / nlen);
            let mut cos = n[0] * to_light[0] + n[1] * to_light[1] + n[2] * to_light[2];
            if cos < 0.0 {
                cos = -cos;
            }
            let falloff = 1.0 / (1.0 + (p[2] / (0.5 * hi)).powi(2));
            let shade = 0.08 + 0.92 * cos * falloff;
            for c in 0..3 {
                let val = albedo[v * w + u][c] * shade + noise.sample(&mut rng);
                image[c * h * w + v * w + u] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }

    Sample::new(
        Tensor::from_vec(&[3, h, w], image)?,
        DepthMap::from_values(h, w, depth, d_max)?,
        format!("synth-{seed}"),
    )
}

/// `n` scenes whose seeds derive from `seed` and the index.
pub fn synthetic_dataset(n: usize, h: usize, w: usize, seed: u64, d_min: f64, d_max: f64) -> Result<Vec<Sample>> {
    (0..n as u64).map(|i| synth_scene(seed.wrapping_mul(1_000_003).wrapping_add(i), h, w, d_min, d_max)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synth_scene(42, 64, 64, 1e-3, 10.0).unwrap();
        let b = synth_scene(42, 64, 64, 1e-3, 10.0).unwrap();
        assert_eq!(a, b);
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn depth_stays_inside_the_range() {
        for seed in 0..1000 {
            let s = synth_scene(seed, 32, 32, 1e-3, 10.0).unwrap();
            assert_eq!(s.depth.n_valid(), 32 * 32);
            assert!(s.depth.data().iter().all(|&d| d > 1e-3 && d < 10.0 && (0.101 - 1e-12..=9.9).contains(&d)));
            assert!(s.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn different_seeds_give_different_images() {
        for seed in 0..100 {
            let a = synth_scene(seed, 64, 64, 1e-3, 10.0).unwrap();
            let b = synth_scene(seed + 1000, 64, 64, 1e-3, 10.0).unwrap();
            let differ = (0..64 * 64)
                .filter(|&i| (0..3).any(|c| (a.image.data()[c * 4096 + i] - b.image.data()[c * 4096 + i]).abs() > 0.05))
                .count();
            assert!(differ as f64 > 0.01 * 4096.0, "seed {seed}: {differ}");
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(synth_scene(0, 48, 64, 1e-3, 10.0).is_err());
        assert!(synth_scene(0, 64, 64, 1.0, 1.1).is_err());
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = synthetic_dataset(4, 32, 64, 7, 1e-3, 10.0).unwrap();
        assert_eq!(a, synthetic_dataset(4, 32, 64, 7, 1e-3, 10.0).unwrap());
        assert_ne!(a[0], a[1]);
    }
}
