//! Named parameter storage and initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Flat map from dotted parameter path (`stage1.block0.attn.q.weight`) to
/// array. Iteration order is lexicographic by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) {
        self.map.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(path)
    }

    pub fn require(&self, path: &str) -> Result<&Tensor<T>> {
        self.map.get(path).ok_or_else(|| Error::Shape(format!("missing parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Zero-filled store with identical paths and shapes.
    pub fn zeros_like(&self) -> Self {
        Self { map: self.map.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    /// Path-by-path shape agreement against a reference layout.
    pub fn check_layout(&self, reference: &Self) -> Result<()> {
        let mut problems = Vec::new();
        for (k, v) in &reference.map {
            match self.map.get(k) {
                None => problems.push(format!("missing `{k}`")),
                Some(t) if t.shape() != v.shape() => {
                    problems.push(format!("`{k}` has shape {:?}, expected {:?}", t.shape(), v.shape()))
                }
                _ => {}
            }
        }
        for k in self.map.keys() {
            if !reference.map.contains_key(k) {
                problems.push(format!("unexpected `{k}`"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape(problems.join("; ")))
        }
    }
}

/// Builds parameters with the standard initialization: truncated normal
/// (std 0.02, cut at two standard deviations) for weights, zeros for biases
/// and norm shifts, ones for norm scales.
pub struct Initializer<'r> {
    rng: &'r mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl<'r> Initializer<'r> {
    pub const STD: f64 = 0.02;

    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng, normal: Normal::new(0.0, Self::STD).expect("valid std") }
    }

    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = self.normal.sample(self.rng);
                if v.abs() <= 2.0 * Self::STD {
                    break T::from_f64(v);
                }
            })
            .collect();
        Tensor::from_vec(shape, data).expect("length matches shape")
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.random_range(-bound..=bound))).collect();
        Tensor::from_vec(shape, data).expect("length matches shape")
    }

    /// `prefix.weight` (trunc normal, `[out, in]`) and `prefix.bias` (zeros).
    pub fn linear<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_out: usize) {
        store.insert(format!("{prefix}.weight"), self.trunc_normal(&[d_out, d_in]));
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
    }

    /// `prefix.weight` as `[out, in, k, k]` plus zero bias. Conv weights use
    /// fan-out scaled normal init so deep conv stacks keep unit-order
    /// activations.
    pub fn conv<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        let std = (2.0 / (k * k * c_out) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = c_out * c_in * k * k;
        let data = (0..n).map(|_| T::from_f64(dist.sample(self.rng))).collect();
        store.insert(format!("{prefix}.weight"), Tensor::from_vec(&[c_out, c_in, k, k], data).expect("shape"));
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
    }

    /// Transposed conv, weight `[in, out, k, k]`.
    pub fn conv_transpose<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        let std = (2.0 / (k * k * c_out) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = c_out * c_in * k * k;
        let data = (0..n).map(|_| T::from_f64(dist.sample(self.rng))).collect();
        store.insert(format!("{prefix}.weight"), Tensor::from_vec(&[c_in, c_out, k, k], data).expect("shape"));
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
    }

    pub fn norm<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, dim: usize) {
        store.insert(format!("{prefix}.weight"), Tensor::full(&[dim], T::ONE));
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Tensor<f32> = Initializer::new(&mut rng).trunc_normal(&[1000]);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Tensor<f32> = Initializer::new(&mut rng).trunc_normal(&[1000]);
        assert_eq!(a, b);
    }

    #[test]
    fn layout_check_reports_mismatch() {
        let mut a = ParamStore::<f32>::new();
        a.insert("x.weight", Tensor::zeros(&[2, 2]));
        let mut b = a.clone();
        assert!(a.check_layout(&b).is_ok());
        b.insert("x.weight", Tensor::zeros(&[3, 2]));
        let err = a.check_layout(&b).unwrap_err().to_string();
        assert!(err.contains("x.weight"));
    }
}
