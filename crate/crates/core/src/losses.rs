//! Scale-invariant log loss, the bin-centre Chamfer loss and their weighted
//! sum, evaluated on plain arrays.
//!
//! The differentiable versions live on the tape ([`Tape::silog`],
//! [`Tape::chamfer`]); both share the conventions documented here.
//!
//! [`Tape::silog`]: crate::autograd::Tape::silog
//! [`Tape::chamfer`]: crate::autograd::Tape::chamfer

use rand::seq::index;
use rand::Rng;

use crate::autograd::chamfer_terms;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::head::BinPartition;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub silog: f64,
    pub chamfer: f64,
    pub total: f64,
    pub n_valid_pixels: usize,
}

impl LossBreakdown {
    pub fn new(silog: f64, chamfer: f64, gamma: f64, n_valid_pixels: usize) -> Self {
        Self { silog, chamfer, total: silog + gamma * chamfer, n_valid_pixels }
    }
}

fn check_lengths(op: &'static str, a: usize, b: usize, m: usize) -> Result<()> {
    if a != b || b != m {
        return Err(Error::Shape(format!("{op}: lengths {a}, {b} and mask {m} differ")));
    }
    Ok(())
}

/// `alpha·sqrt(max(0, mean(g²) − lambda·mean(g)²))`, `g = ln pred − ln gt`.
pub fn silog_loss(pred: &[f64], gt: &[f64], mask: &[bool], alpha: f64, lambda: f64) -> Result<f64> {
    check_lengths("silog_loss", pred.len(), gt.len(), mask.len())?;
    let (mut n, mut s1, mut s2) = (0usize, 0.0, 0.0);
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        if !(pred[i] > 0.0) || !(gt[i] > 0.0) {
            return Err(Error::Domain(format!("silog_loss: nonpositive depth at pixel {i}")));
        }
        let g = pred[i].ln() - gt[i].ln();
        s1 += g;
        s2 += g * g;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = s1 / n as f64;
    let radicand = (s2 / n as f64 - lambda * mean * mean).max(0.0);
    Ok(alpha * radicand.sqrt())
}

/// Valid ground-truth values, subsampled without replacement to at most
/// `cap` points. Order follows pixel order.
pub fn sample_targets<R: Rng + ?Sized>(gt: &[f64], mask: &[bool], cap: usize, rng: &mut R) -> Vec<f64> {
    let valid: Vec<f64> = gt.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if valid.len() <= cap {
        return valid;
    }
    let mut picked = index::sample(rng, valid.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| valid[i]).collect()
}

/// Mean-normalized bidirectional squared Chamfer distance between the bin
/// centres and the (sampled) valid ground truth.
pub fn chamfer_loss<R: Rng + ?Sized>(
    bins: &BinPartition,
    gt: &[f64],
    mask: &[bool],
    sample_cap: usize,
    rng: &mut R,
) -> Result<f64> {
    if gt.len() != mask.len() {
        return Err(Error::Shape(format!("chamfer_loss: {} values vs mask {}", gt.len(), mask.len())));
    }
    let targets = sample_targets(gt, mask, sample_cap, rng);
    chamfer_points(&bins.centers, &targets)
}

/// Chamfer distance between two explicit point sets.
pub fn chamfer_points(centers: &[f64], targets: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyMask);
    }
    if centers.is_empty() {
        return Err(Error::Shape("chamfer: no bin centres".into()));
    }
    Ok(chamfer_terms(centers, targets).0)
}

/// `silog + gamma·chamfer` for one image.
pub fn total_loss<R: Rng + ?Sized>(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
    bins: &BinPartition,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let silog = silog_loss(pred, gt, mask, cfg.silog_alpha, cfg.silog_lambda)?;
    let chamfer = chamfer_loss(bins, gt, mask, cfg.chamfer_sample_cap, rng)?;
    let n = mask.iter().filter(|&&m| m).count();
    Ok(LossBreakdown::new(silog, chamfer, cfg.gamma, n))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;
    use crate::head::bin_centers;
    use crate::tensor::Tensor;

    fn gt_map() -> Vec<f64> {
        (0..48).map(|i| 0.5 + (i as f64 * 0.731).rem_euclid(9.0)).collect()
    }

    #[test]
    fn silog_examples() {
        let gt = gt_map();
        let mask = vec![true; gt.len()];
        assert_eq!(silog_loss(&gt, &gt, &mask, 10.0, 0.85).unwrap(), 0.0);
        let scaled: Vec<f64> = gt.iter().map(|v| v * std::f64::consts::E).collect();
        let v = silog_loss(&scaled, &gt, &mask, 10.0, 0.85).unwrap();
        assert!((v - 10.0 * 0.15f64.sqrt()).abs() < 1e-12);
        assert!((v - 3.872983).abs() < 1e-6);
        for c in [0.5, 2.0, 10.0, 1.7] {
            let p: Vec<f64> = gt.iter().map(|v| v * c).collect();
            assert!(silog_loss(&p, &gt, &mask, 10.0, 1.0).unwrap() < 1e-6);
        }
    }

    #[test]
    fn silog_errors() {
        let gt = gt_map();
        assert!(matches!(silog_loss(&gt, &gt, &vec![false; gt.len()], 10.0, 0.85), Err(Error::EmptyMask)));
        let mut pred = gt.clone();
        pred[5] = 0.0;
        assert!(matches!(silog_loss(&pred, &gt, &vec![true; gt.len()], 10.0, 0.85), Err(Error::Domain(_))));
        let mut mask = vec![true; gt.len()];
        mask[5] = false;
        assert!(silog_loss(&pred, &gt, &mask, 10.0, 0.85).is_ok());
    }

    #[test]
    fn silog_grows_with_scale_distortion() {
        let gt = gt_map();
        let mask = vec![true; gt.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise: Vec<f64> = (0..gt.len()).map(|_| rng.random_range(0.8..1.25)).collect();
        let mut last = -1.0;
        for c in [1.0, 1.5, 2.0, 4.0] {
            // push every prediction further from gt by a pixel-dependent power
            let pred: Vec<f64> = gt.iter().zip(&noise).map(|(g, n)| g * n.powf(c)).collect();
            let v = silog_loss(&pred, &gt, &mask, 10.0, 0.85).unwrap();
            assert!(v >= last, "c={c}: {v} < {last}");
            last = v;
        }
        let mut last = -1.0;
        for c in [1.0, 1.5, 2.0, 4.0] {
            let pred: Vec<f64> = gt.iter().map(|g| g * c).collect();
            let v = silog_loss(&pred, &gt, &mask, 10.0, 0.85).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer_points(&[2.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(chamfer_points(&[2.5, 7.5], &[5.0]).unwrap(), 12.5);
        let c = [0.3, 1.9, 4.4, 8.0];
        assert_eq!(chamfer_points(&c, &c).unwrap(), 0.0);
        let part = bin_centers(&[0.5, 0.5], 0.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = chamfer_loss(&part, &[5.0, 0.0], &[true, false], 2048, &mut rng).unwrap();
        assert_eq!(v, 12.5);
        assert!(matches!(chamfer_loss(&part, &[5.0], &[false], 2048, &mut rng), Err(Error::EmptyMask)));
    }

    #[test]
    fn sampling_is_seeded_and_capped() {
        let gt: Vec<f64> = (0..5000).map(|i| i as f64).collect();
        let mut mask = vec![true; gt.len()];
        mask[7] = false;
        let a = sample_targets(&gt, &mask, 2048, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_targets(&gt, &mask, 2048, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 2048);
        assert!(!a.contains(&7.0));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_targets(&gt[..10], &mask[..10], 2048, &mut ChaCha8Rng::seed_from_u64(9)).len(), 9);
    }

    #[test]
    fn total_combines_components() {
        let cfg = TrainConfig::default();
        let part = bin_centers(&[0.5, 0.5], 0.0, 10.0);
        let gt = gt_map();
        let mask = vec![true; gt.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = total_loss(&gt, &gt, &mask, &part, &TrainConfig { gamma: 0.0, ..cfg.clone() }, &mut rng).unwrap();
        assert_eq!(b.total, 0.0);
        let b = LossBreakdown::new(3.872983, 2.0, 0.1, 1);
        assert_eq!(b.total, 3.872983 + 0.1 * 2.0);
        assert!((b.total - 4.072983).abs() < 1e-12);
        let b = total_loss(&gt, &gt, &mask, &part, &cfg, &mut rng).unwrap();
        assert_eq!(b.total, b.silog + cfg.gamma * b.chamfer);
        assert_eq!(b.n_valid_pixels, gt.len());
    }

    #[test]
    fn tape_losses_agree_with_plain() {
        let gt = gt_map();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.random_range(0.5..2.0)).collect();
        let mask: Vec<bool> = (0..gt.len()).map(|i| i % 5 != 0).collect();
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_vec(&[1, 1, 6, 8], pred.clone()).unwrap());
        let s = tape.silog(p, &gt, &mask, 10.0, 0.85).unwrap();
        assert!((tape.value(s).data()[0] - silog_loss(&pred, &gt, &mask, 10.0, 0.85).unwrap()).abs() < 1e-12);
        let centers = vec![0.7, 2.0, 3.3, 9.1];
        let c = tape.constant(Tensor::from_vec(&[1, 4], centers.clone()).unwrap());
        let ch = tape.chamfer(c, &[gt.clone()]).unwrap();
        assert!((tape.value(ch).data()[0] - chamfer_points(&centers, &gt).unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn silog_is_permutation_invariant(vals in prop::collection::vec((0.1f64..20.0, 0.1f64..20.0), 1..64), seed in any::<u64>()) {
            let pred: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let gt: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let mask = vec![true; vals.len()];
            let mut order: Vec<usize> = (0..vals.len()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<f64> = order.iter().map(|&i| pred[i]).collect();
            let gp: Vec<f64> = order.iter().map(|&i| gt[i]).collect();
            let a = silog_loss(&pred, &gt, &mask, 10.0, 0.85).unwrap();
            let b = silog_loss(&pp, &gp, &mask, 10.0, 0.85).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn chamfer_nonnegative_and_zero_on_equal_sets(xs in prop::collection::vec(0.0f64..80.0, 1..40)) {
            prop_assert_eq!(chamfer_points(&xs, &xs).unwrap(), 0.0);
            let shifted: Vec<f64> = xs.iter().map(|v| v + 0.5).collect();
            prop_assert!(chamfer_points(&xs, &shifted).unwrap() >= 0.0);
        }
    }
}
