//! One-cycle learning-rate schedule and AdamW.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Fraction of `max_lr` at both ends of the cycle.
pub const LR_FLOOR: f64 = 0.3;

/// Linear warm-up from `0.3·max_lr` to `max_lr` over the first half of
/// `total` steps, then cosine annealing back to `0.3·max_lr` at `t = total`.
pub fn one_cycle_lr(t: usize, max_lr: f64, total: usize) -> Result<f64> {
    if t > total {
        return Err(Error::invalid("one_cycle_lr", format!("step {t} outside [0, {total}]")));
    }
    let lo = LR_FLOOR * max_lr;
    if total == 0 {
        return Ok(lo);
    }
    let half = total as f64 / 2.0;
    let t = t as f64;
    // lerp form keeps both ends and the peak exact
    Ok(if t <= half {
        let f = t / half;
        (1.0 - f) * lo + f * max_lr
    } else {
        let s = (t - half) / half;
        let c = (1.0 + (std::f64::consts::PI * s).cos()) / 2.0;
        lo * (1.0 - c) + max_lr * c
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// First and second moments, shape-matched to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// Biases and normalization parameters (every tensor with fewer than two
/// axes) are not decayed.
pub fn decays(t: &Tensor<f32>) -> bool {
    t.ndim() >= 2
}

impl AdamW {
    /// One update at learning rate `lr`. Rejects the whole step, leaving
    /// everything untouched, if any gradient is not finite.
    pub fn step(
        &self,
        params: &mut ParamStore<f32>,
        grads: &ParamStore<f32>,
        state: &mut OptimState,
        lr: f64,
    ) -> Result<()> {
        params.check_layout(grads)?;
        for (path, g) in grads.iter() {
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFiniteGradient { path: path.clone(), count: bad });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (path, p) in params.iter_mut() {
            let g = grads.require(path)?.data();
            let m = state.m.get_mut(path).ok_or_else(|| Error::Shape(format!("no first moment for `{path}`")))?;
            let m = m.data_mut();
            let v = state.v.get_mut(path).ok_or_else(|| Error::Shape(format!("no second moment for `{path}`")))?;
            let v = v.data_mut();
            let decay = if decays(p) { 1.0 - lr * self.weight_decay } else { 1.0 };
            for (i, pi) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                *pi = (*pi as f64 * decay - lr * update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[(&str, &[usize], Vec<f32>)]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (name, shape, data) in vals {
            s.insert(*name, Tensor::from_vec(shape, data.clone()).unwrap());
        }
        s
    }

    #[test]
    fn schedule_anchor_points() {
        let m = 1e-4;
        for total in [2, 10, 1000, 2001] {
            assert_eq!(one_cycle_lr(0, m, total).unwrap(), 0.3 * m);
            assert_eq!(one_cycle_lr(total, m, total).unwrap(), 0.3 * m);
            if total % 2 == 0 {
                assert_eq!(one_cycle_lr(total / 2, m, total).unwrap(), m);
            }
        }
        assert!((one_cycle_lr(250, m, 1000).unwrap() - 6.5e-5).abs() < 1e-12 * m.max(1.0));
        assert!((one_cycle_lr(0, m, 1000).unwrap() - 3e-5).abs() < 1e-18);
        assert!(one_cycle_lr(1001, m, 1000).is_err());
    }

    #[test]
    fn schedule_is_bounded_and_continuous() {
        let (m, total) = (2e-3, 1000);
        let lrs: Vec<f64> = (0..=total).map(|t| one_cycle_lr(t, m, total).unwrap()).collect();
        assert!(lrs.iter().all(|&l| (0.3 * m..=m).contains(&l)));
        assert!((lrs[total / 2 - 1] - lrs[total / 2]).abs() <= 0.7 * m * 2.0 / total as f64 + 1e-12);
        assert!(lrs.windows(2).take(total / 2).all(|w| w[0] <= w[1]));
        assert!(lrs.windows(2).skip(total / 2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn first_step_on_a_scalar() {
        let mut p = store(&[("p", &[1], vec![1.0])]);
        let g = store(&[("p", &[1], vec![1.0])]);
        let mut st = OptimState::new(&p);
        AdamW::new(0.0).step(&mut p, &g, &mut st, 0.1).unwrap();
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.require("p").unwrap().data()[0] as f64 - expect).abs() < 1e-7);
        assert!((p.require("p").unwrap().data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_and_zero_grads() {
        let p0 = store(&[("w", &[2, 2], vec![1.0, -2.0, 3.0, 0.5]), ("b", &[2], vec![0.1, 0.2])]);
        let g = store(&[("w", &[2, 2], vec![0.3, 0.1, -4.0, 2.0]), ("b", &[2], vec![1.0, 1.0])]);
        let mut p = p0.clone();
        let mut st = OptimState::new(&p);
        AdamW::new(0.1).step(&mut p, &g, &mut st, 0.0).unwrap();
        assert_eq!(p, p0);

        let mut p = p0.clone();
        let mut st = OptimState::new(&p);
        AdamW::new(0.0).step(&mut p, &p0.zeros_like(), &mut st, 0.01).unwrap();
        assert_eq!(p, p0);
        assert!(st.m.iter().chain(st.v.iter()).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_grads_decay_matrices_geometrically() {
        let p0 = store(&[("w", &[1, 2], vec![1.0, -2.0]), ("b", &[2], vec![0.5, 0.5])]);
        let mut p = p0.clone();
        let mut st = OptimState::new(&p);
        let (lr, wd) = (0.01, 0.1);
        for _ in 0..5 {
            AdamW::new(wd).step(&mut p, &p0.zeros_like(), &mut st, lr).unwrap();
        }
        let k = (1.0f64 - lr * wd).powi(5);
        let w = p.require("w").unwrap().data();
        assert!((w[0] as f64 - k).abs() < 1e-6 && (w[1] as f64 + 2.0 * k).abs() < 1e-6);
        assert_eq!(p.require("b").unwrap(), p0.require("b").unwrap());
    }

    #[test]
    fn wd_zero_matches_plain_adam() {
        let mut p = store(&[("w", &[1, 3], vec![0.5, -1.0, 2.0])]);
        let mut st = OptimState::new(&p);
        let mut reference = [0.5f64, -1.0, 2.0];
        let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
        for t in 1..=20 {
            let grads: Vec<f32> = reference.iter().map(|&x| (2.0 * x - 0.3 * t as f64) as f32).collect();
            let gs = store(&[("w", &[1, 3], grads.clone())]);
            AdamW::new(0.0).step(&mut p, &gs, &mut st, 0.05).unwrap();
            for i in 0..3 {
                let g = grads[i] as f64;
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                reference[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in p.require("w").unwrap().data().iter().zip(reference) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_gradients_reject_the_step() {
        let p0 = store(&[("a", &[2], vec![1.0, 2.0]), ("z", &[2], vec![1.0, 2.0])]);
        let g = store(&[("a", &[2], vec![1.0, 1.0]), ("z", &[2], vec![f32::NAN, f32::INFINITY])]);
        let mut p = p0.clone();
        let mut st = OptimState::new(&p);
        let err = AdamW::new(0.1).step(&mut p, &g, &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref path, count: 2 } if path == "z"));
        assert_eq!((p, st.step), (p0, 0));
    }
}
