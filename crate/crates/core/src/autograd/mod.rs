//! Tape-based reverse-mode differentiation over the tensor ops the model
//! needs.
//!
//! Every op validates shapes, computes its value eagerly and records enough
//! state to push gradients back to its inputs. Parameters enter the tape by
//! path so gradients can be returned as a [`ParamStore`].

mod kernels;

use std::borrow::Cow;
use std::collections::HashMap;

pub use kernels::{bilinear_taps, ConvGeom};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Axpy { a: Var, b: Var, gamma: T },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, k: usize },
    LayerNorm { x: Var, g: Var, b: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    TokensToMap(Var),
    MapToTokens(Var),
    ConcatChannels(Var, Var),
    Resize(Var),
    SpatialMean(Var),
    SoftmaxChannels(Var),
    SelectToken(Var, usize),
    NormalizeRows { x: Var, sums: Vec<T> },
    BinCenters { w: Var, span: T },
    WeightedSum { probs: Var, centers: Var },
    Silog { pred: Var, coeffs: Vec<T> },
    Chamfer { centers: Var, coeffs: Vec<T> },
    Contract { x: Var, weights: Vec<T> },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<String, Var>,
    kink_hash: Option<u64>,
}

/// Gradients of a scalar root with respect to every recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients keyed by parameter path. Parameters that did not influence
    /// the root get zero gradients of the right shape.
    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, var) in &self.params {
            if let Some(g) = self.grads[var.0].take() {
                out.insert(name.clone(), g);
            }
        }
        for (name, t) in store.iter() {
            if !out.contains(name) {
                out.insert(name.clone(), Tensor::zeros(t.shape()));
            }
        }
        out
    }
}

fn shape_err(op: &str, msg: impl std::fmt::Display) -> Error {
    Error::Shape(format!("{op}: {msg}"))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: None, param_vars: HashMap::new(), kink_hash: None }
    }

    /// A tape whose [`Tape::param`] lookups resolve against `store`.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self { params: Some(store), ..Self::new() }
    }

    /// Enable a running hash over every piecewise branch decision (ReLU
    /// sides, clamps, nearest-neighbour choices). Two forwards with the same
    /// signature lie on the same smooth piece.
    pub fn track_kinks(&mut self) {
        self.kink_hash = Some(FNV_OFFSET);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kink_hash
    }

    fn mix_kink(&mut self, bit: u64) {
        if let Some(h) = self.kink_hash.as_mut() {
            *h = (*h ^ bit).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attention probabilities `[batch, heads, queries, keys]` recorded by an
    /// attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Named parameter from the attached store; repeated lookups return the
    /// same handle.
    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(path) {
            return Ok(v);
        }
        let store = self.params.ok_or_else(|| shape_err("param", "tape has no parameter store"))?;
        let t = store.require(path)?;
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a + gamma * b` for same-shape values.
    pub fn axpy(&mut self, a: Var, b: Var, gamma: T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("axpy", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = va.iter().zip(vb).map(|(&x, &y)| x + gamma * y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(out, Op::Axpy { a, b, gamma }, &[a, b]))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().ok_or_else(|| shape_err("linear", "scalar input"))?;
        if ws.len() != 2 || ws[1] != d_in {
            return Err(shape_err("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let d_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(shape_err("linear", "bias length"));
            }
        }
        let m = xs.iter().product::<usize>() / d_in;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("non-empty") = d_out;
        let mut out = Tensor::zeros(&out_shape);
        gemm(
            MatRef::new(self.value(x).data(), m, d_in),
            MatRef::new(self.value(w).data(), d_out, d_in).t(),
            T::ZERO,
            out.data_mut(),
            d_out,
            1,
        );
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// 2-D convolution on `[B, C, H, W]` with weight `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {} too large for {xs:?}", ws[2])))?;
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", "bias length"));
            }
        }
        let batch = xs[0];
        let in_per = geom.cin * geom.h * geom.w;
        let out_per = geom.cout * geom.ho * geom.wo;
        let mut out = Tensor::zeros(&[batch, geom.cout, geom.ho, geom.wo]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for (bi, o) in out.data_mut().chunks_mut(out_per).enumerate() {
                kernels::conv2d_forward(&geom, &xv[bi * in_per..(bi + 1) * in_per], wv, bv, o);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution with kernel == stride == `k`; weight `[in, out, k, k]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv_transpose", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (cin, cout, k) = (ws[0], ws[1], ws[2]);
        let (batch, h, wd) = (xs[0], xs[2], xs[3]);
        let mut out = Tensor::zeros(&[batch, cout, h * k, wd * k]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let in_per = cin * h * wd;
            for (bi, o) in out.data_mut().chunks_mut(cout * h * k * wd * k).enumerate() {
                kernels::conv_transpose_forward(cin, h, wd, cout, k, &xv[bi * in_per..(bi + 1) * in_per], wv, bv, o);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose { x, w, b, k }, &inputs))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(g) != [d] || self.shape(b) != [d] {
            return Err(shape_err("layer_norm", "scale/shift length"));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let dn = T::from_f64(d as f64);
        let gv = self.value(g).data();
        let bv = self.value(b).data();
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::ZERO; xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let r = T::ONE / (var + eps).sqrt();
            for i in 0..d {
                o[i] = (row[i] - mu) * r * gv[i] + bv[i];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let out = Tensor::from_vec(&xs, out)?;
        Ok(self.push(out, Op::LayerNorm { x, g, b, mean, rstd }, &[x, g, b]))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out = self.value(x).map(|v| half * v * (T::ONE + (v * inv_sqrt2).erf()));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.kink_hash.is_some() {
            let bits: Vec<u64> = self.value(x).data().iter().map(|&v| (v > T::ZERO) as u64).collect();
            for b in bits {
                self.mix_kink(b);
            }
        }
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        if self.kink_hash.is_some() {
            let bits: Vec<u64> = self.value(x).data().iter().map(|&v| (v > T::ZERO) as u64).collect();
            for b in bits {
                self.mix_kink(b);
            }
        }
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// Multi-head scaled dot-product attention. `q` is `[B, N, D]`, `k`/`v`
    /// are `[B, M, D]`; heads split `D` into contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if qs.len() != 3 || ks.len() != 3 || self.shape(v) != ks.as_slice() || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(shape_err("attention", format!("q {qs:?}, k {ks:?}, v {:?}", self.shape(v))));
        }
        let (batch, n, d) = (qs[0], qs[1], qs[2]);
        let m = ks[1];
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::ZERO; batch * heads * n * m];
        let mut out = Tensor::zeros(&[batch, n, d]);
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            let vv = self.value(v).data();
            let od = out.data_mut();
            for b in 0..batch {
                for h in 0..heads {
                    let p = &mut probs[(b * heads + h) * n * m..][..n * m];
                    let qh = MatRef::strided(&qv[b * n * d + h * dh..], n, dh, d, 1);
                    let kh = MatRef::strided(&kv[b * m * d + h * dh..], m, dh, d, 1);
                    let vh = MatRef::strided(&vv[b * m * d + h * dh..], m, dh, d, 1);
                    gemm(qh, kh.t(), T::ZERO, p, m, 1);
                    for row in p.chunks_mut(m) {
                        softmax_in_place(row, scale);
                    }
                    gemm(MatRef::new(p, n, m), vh, T::ZERO, &mut od[b * n * d + h * dh..], d, 1);
                }
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// `[B, N, D]` tokens with `N = h·w` to a `[B, D, h, w]` map.
    pub fn tokens_to_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != h * w {
            return Err(shape_err("tokens_to_map", format!("{xs:?} vs {h}x{w}")));
        }
        let (batch, n, d) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(&[batch, d, h, w]);
        transpose_batched(self.value(x).data(), out.data_mut(), batch, n, d);
        Ok(self.push(out, Op::TokensToMap(x), &[x]))
    }

    /// `[B, C, H, W]` map to `[B, H·W, C]` tokens.
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("map_to_tokens", format!("{xs:?}")));
        }
        let (batch, c, n) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut out = Tensor::zeros(&[batch, n, c]);
        transpose_batched(self.value(x).data(), out.data_mut(), batch, c, n);
        Ok(self.push(out, Op::MapToTokens(x), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let hw = sa[2] * sa[3];
        let (pa, pb) = (sa[1] * hw, sb[1] * hw);
        let mut data = Vec::with_capacity(sa[0] * (pa + pb));
        let va = self.value(a).data();
        let vb = self.value(b).data();
        for i in 0..sa[0] {
            data.extend_from_slice(&va[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&vb[i * pb..(i + 1) * pb]);
        }
        let out = Tensor::from_vec(&[sa[0], sa[1] + sb[1], sa[2], sa[3]], data)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Bilinear resampling with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || oh == 0 || ow == 0 {
            return Err(shape_err("resize_bilinear", format!("{xs:?} -> {oh}x{ow}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let mut out = Tensor::zeros(&[xs[0], xs[1], oh, ow]);
        let xv = self.value(x).data();
        for (p, o) in out.data_mut().chunks_mut(oh * ow).enumerate().take(planes) {
            kernels::resize_plane(&xv[p * h * w..(p + 1) * h * w], o, w, &ty, &tx);
        }
        Ok(self.push(out, Op::Resize(x), &[x]))
    }

    /// Mean over spatial axes: `[B, C, H, W]` to `[B, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("spatial_mean", format!("{xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let data = self.value(x).data().chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[xs[0], xs[1]], data)?;
        Ok(self.push(out, Op::SpatialMean(x), &[x]))
    }

    /// Softmax over axis 1 of a `[B, K, H, W]` map.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("softmax_channels", format!("{xs:?}")));
        }
        let (kk, hw) = (xs[1], xs[2] * xs[3]);
        let mut out = self.value(x).clone();
        let mut col = vec![T::ZERO; kk];
        for img in out.data_mut().chunks_mut(kk * hw) {
            for p in 0..hw {
                for k in 0..kk {
                    col[k] = img[k * hw + p];
                }
                softmax_in_place(&mut col, T::ONE);
                for k in 0..kk {
                    img[k * hw + p] = col[k];
                }
            }
        }
        Ok(self.push(out, Op::SoftmaxChannels(x), &[x]))
    }

    /// Token `idx` of every batch element: `[B, N, D]` to `[B, D]`.
    pub fn select_token(&mut self, x: Var, idx: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || idx >= xs[1] {
            return Err(shape_err("select_token", format!("{xs:?} index {idx}")));
        }
        let (n, d) = (xs[1], xs[2]);
        let xv = self.value(x).data();
        let data = (0..xs[0]).flat_map(|b| xv[(b * n + idx) * d..(b * n + idx + 1) * d].to_vec()).collect();
        let out = Tensor::from_vec(&[xs[0], d], data)?;
        Ok(self.push(out, Op::SelectToken(x, idx), &[x]))
    }

    /// Row-wise `(x + eps) / Σ(x + eps)` on `[B, K]`.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("normalize_rows", format!("{xs:?}")));
        }
        let k = xs[1];
        let mut out = self.value(x).clone();
        let mut sums = Vec::with_capacity(xs[0]);
        for row in out.data_mut().chunks_mut(k) {
            let s = row.iter().map(|&v| v + eps).sum::<T>();
            for v in row.iter_mut() {
                *v = (*v + eps) / s;
            }
            sums.push(s);
        }
        Ok(self.push(out, Op::NormalizeRows { x, sums }, &[x]))
    }

    /// Bin centres `d_min + span·(Σ_{j<k} w_j + w_k/2)` on `[B, K]` widths.
    pub fn bin_centers(&mut self, w: Var, d_min: T, d_max: T) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(shape_err("bin_centers", format!("{ws:?}")));
        }
        let span = d_max - d_min;
        let half = T::from_f64(0.5);
        let mut out = self.value(w).clone();
        for row in out.data_mut().chunks_mut(ws[1]) {
            let mut cum = T::ZERO;
            for v in row.iter_mut() {
                let wk = *v;
                *v = d_min + span * (cum + wk * half);
                cum += wk;
            }
        }
        Ok(self.push(out, Op::BinCenters { w, span }, &[w]))
    }

    /// Per-pixel `Σ_k probs[b,k,y,x]·centers[b,k]`, giving `[B, 1, H, W]`.
    pub fn weighted_sum_channels(&mut self, probs: Var, centers: Var) -> Result<Var> {
        let ps = self.shape(probs).to_vec();
        let cs = self.shape(centers).to_vec();
        if ps.len() != 4 || cs.len() != 2 || cs[0] != ps[0] || cs[1] != ps[1] {
            return Err(shape_err("weighted_sum_channels", format!("{ps:?} vs {cs:?}")));
        }
        let (kk, hw) = (ps[1], ps[2] * ps[3]);
        let mut out = Tensor::zeros(&[ps[0], 1, ps[2], ps[3]]);
        let pv = self.value(probs).data();
        let cv = self.value(centers).data();
        for (b, o) in out.data_mut().chunks_mut(hw).enumerate() {
            for k in 0..kk {
                let c = cv[b * kk + k];
                let plane = &pv[(b * kk + k) * hw..][..hw];
                for (dst, &p) in o.iter_mut().zip(plane) {
                    *dst += p * c;
                }
            }
        }
        Ok(self.push(out, Op::WeightedSum { probs, centers }, &[probs, centers]))
    }

    /// Batch mean of per-image `alpha·sqrt(max(0, E[g²] − lambda·E[g]²))`
    /// with `g = ln(pred) − ln(gt)` over masked pixels. `pred` is
    /// `[B, 1, H, W]`; `gt` and `mask` are flat per batch in the same order.
    pub fn silog(&mut self, pred: Var, gt: &[T], mask: &[bool], alpha: T, lambda: T) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps.len() != 4 || ps[1] != 1 || gt.len() != self.value(pred).len() || mask.len() != gt.len() {
            return Err(shape_err("silog", format!("pred {ps:?} vs {} targets", gt.len())));
        }
        let hw = ps[2] * ps[3];
        let batch = ps[0];
        let pv = self.value(pred).data();
        let mut coeffs = vec![T::ZERO; pv.len()];
        let mut total = T::ZERO;
        let inv_b = T::ONE / T::from_f64(batch as f64);
        let mut clamp_bits = Vec::with_capacity(batch);
        for b in 0..batch {
            let range = b * hw..(b + 1) * hw;
            let mut n = 0usize;
            let (mut s1, mut s2) = (T::ZERO, T::ZERO);
            for i in range.clone() {
                if !mask[i] {
                    continue;
                }
                if !(pv[i] > T::ZERO) || !(gt[i] > T::ZERO) {
                    return Err(Error::Domain(format!("silog: nonpositive depth at pixel {i}")));
                }
                let g = pv[i].ln() - gt[i].ln();
                s1 += g;
                s2 += g * g;
                n += 1;
            }
            if n == 0 {
                return Err(Error::EmptyMask);
            }
            let nn = T::from_f64(n as f64);
            let mean = s1 / nn;
            let radicand = s2 / nn - lambda * mean * mean;
            clamp_bits.push((radicand > T::ZERO) as u64);
            if radicand > T::ZERO {
                let root = radicand.sqrt();
                total += alpha * root * inv_b;
                // d/dpred_i = alpha/(2 root) · (2 g_i − 2 lambda mean)/n · 1/pred_i, scaled by 1/B
                let c = alpha / (root * nn) * inv_b;
                for i in range {
                    if mask[i] {
                        let g = pv[i].ln() - gt[i].ln();
                        coeffs[i] = c * (g - lambda * mean) / pv[i];
                    }
                }
            }
        }
        for bit in clamp_bits {
            self.mix_kink(bit);
        }
        Ok(self.push(Tensor::scalar(total), Op::Silog { pred, coeffs }, &[pred]))
    }

    /// Batch mean of the bidirectional, mean-normalized squared Chamfer
    /// distance between each row of `centers` (`[B, K]`) and the matching
    /// target point set.
    pub fn chamfer(&mut self, centers: Var, targets: &[Vec<T>]) -> Result<Var> {
        let cs = self.shape(centers).to_vec();
        if cs.len() != 2 || cs[0] != targets.len() {
            return Err(shape_err("chamfer", format!("centers {cs:?} vs {} target sets", targets.len())));
        }
        let kk = cs[1];
        let inv_b = T::ONE / T::from_f64(cs[0] as f64);
        let cv = self.value(centers).data().to_vec();
        let mut coeffs = vec![T::ZERO; cv.len()];
        let mut total = T::ZERO;
        let mut picks = Vec::new();
        for (b, xs) in targets.iter().enumerate() {
            if xs.is_empty() {
                return Err(Error::EmptyMask);
            }
            let c = &cv[b * kk..(b + 1) * kk];
            let grad = &mut coeffs[b * kk..(b + 1) * kk];
            let (value, fwd, bwd) = chamfer_terms(c, xs);
            total += value * inv_b;
            let nx = T::from_f64(xs.len() as f64);
            let nc = T::from_f64(kk as f64);
            let two = T::from_f64(2.0);
            for (x, &j) in xs.iter().zip(&fwd) {
                grad[j] += two * (c[j] - *x) / nx * inv_b;
                picks.push(j as u64);
            }
            for (k, &i) in bwd.iter().enumerate() {
                grad[k] += two * (c[k] - xs[i]) / nc * inv_b;
                picks.push(i as u64);
            }
        }
        if self.kink_hash.is_some() {
            for p in picks {
                self.mix_kink(p);
            }
        }
        Ok(self.push(Tensor::scalar(total), Op::Chamfer { centers, coeffs }, &[centers]))
    }

    /// Scalar `Σ x ⊙ weights` against a constant weight array.
    pub fn contract(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err("contract", format!("{:?} vs {:?}", self.shape(x), weights.shape())));
        }
        let total = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let weights = weights.data().to_vec();
        Ok(self.push(Tensor::scalar(total), Op::Contract { x, weights }, &[x]))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward", format!("root has shape {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::ONE));
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let params = self.param_vars.iter().map(|(k, &v)| (k.clone(), v)).collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(g) => g.add_assign(&t),
            None => grads[v.0] = Some(t),
        }
    }

    fn backward_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dy = gout.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Axpy { a, b, gamma } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|v| v * *gamma));
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (d_out, d_in) = (ws[0], ws[1]);
                let m = dy.len() / d_out;
                let dym = MatRef::new(dy, m, d_out);
                if self.wants(*x) {
                    let gx = self.slot(grads, *x);
                    gemm(dym, MatRef::new(self.value(*w).data(), d_out, d_in), T::ONE, gx.data_mut(), d_in, 1);
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let gw = self.slot(grads, *w);
                    gemm(dym.t(), MatRef::new(xv, m, d_in), T::ONE, gw.data_mut(), d_in, 1);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = self.slot(grads, *b).data_mut();
                        for row in dy.chunks(d_out) {
                            for (g, &v) in gb.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let batch = self.shape(*x)[0];
                let in_per = geom.cin * geom.h * geom.w;
                let out_per = geom.cout * geom.ho * geom.wo;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = self.wants(*x).then(|| Tensor::<T>::zeros(self.shape(*x)));
                let mut gw = self.wants(*w).then(|| Tensor::<T>::zeros(self.shape(*w)));
                let mut gb = b.filter(|b| self.wants(*b)).map(|b| Tensor::<T>::zeros(self.shape(b)));
                for bi in 0..batch {
                    kernels::conv2d_backward(
                        geom,
                        &xv[bi * in_per..(bi + 1) * in_per],
                        wv,
                        &dy[bi * out_per..(bi + 1) * out_per],
                        gx.as_mut().map(|g| &mut g.data_mut()[bi * in_per..(bi + 1) * in_per]),
                        gw.as_mut().map(|g| g.data_mut()),
                        gb.as_mut().map(|g| g.data_mut()),
                    );
                }
                if let Some(g) = gx {
                    self.accumulate(grads, *x, g);
                }
                if let Some(g) = gw {
                    self.accumulate(grads, *w, g);
                }
                if let (Some(b), Some(g)) = (b, gb) {
                    self.accumulate(grads, *b, g);
                }
            }
            Op::ConvTranspose { x, w, b, k } => {
                let xs = self.shape(*x);
                let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.shape(*w)[1];
                let in_per = cin * h * wd;
                let out_per = cout * h * wd * k * k;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = self.wants(*x).then(|| Tensor::<T>::zeros(xs));
                let mut gw = self.wants(*w).then(|| Tensor::<T>::zeros(self.shape(*w)));
                let mut gb = b.filter(|b| self.wants(*b)).map(|b| Tensor::<T>::zeros(self.shape(b)));
                for bi in 0..batch {
                    kernels::conv_transpose_backward(
                        cin,
                        h,
                        wd,
                        cout,
                        *k,
                        &xv[bi * in_per..(bi + 1) * in_per],
                        wv,
                        &dy[bi * out_per..(bi + 1) * out_per],
                        gx.as_mut().map(|g| &mut g.data_mut()[bi * in_per..(bi + 1) * in_per]),
                        gw.as_mut().map(|g| g.data_mut()),
                        gb.as_mut().map(|g| g.data_mut()),
                    );
                }
                if let Some(g) = gx {
                    self.accumulate(grads, *x, g);
                }
                if let Some(g) = gw {
                    self.accumulate(grads, *w, g);
                }
                if let (Some(b), Some(g)) = (b, gb) {
                    self.accumulate(grads, *b, g);
                }
            }
            Op::LayerNorm { x, g, b, mean, rstd } => {
                let d = self.shape(*g)[0];
                let dn = T::from_f64(d as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*g).data();
                let mut gx = vec![T::ZERO; xv.len()];
                let mut gg = vec![T::ZERO; d];
                let mut gb = vec![T::ZERO; d];
                let mut dxhat = vec![T::ZERO; d];
                for (r, (row, drow)) in xv.chunks(d).zip(dy.chunks(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::ZERO;
                    let mut s2 = T::ZERO;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * rs;
                        gg[j] += drow[j] * xhat;
                        gb[j] += drow[j];
                        dxhat[j] = drow[j] * gv[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat;
                    }
                    let (m1, m2) = (s1 / dn, s2 / dn);
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (row[j] - mu) * rs;
                        out[j] = rs * (dxhat[j] - m1 - xhat * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), gx).expect("shape"));
                self.accumulate(grads, *g, Tensor::from_vec(&[d], gg).expect("shape"));
                self.accumulate(grads, *b, Tensor::from_vec(&[d], gb).expect("shape"));
            }
            Op::Gelu(x) => {
                let c = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let xv = self.value(*x).data();
                let data = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| {
                        let cdf = half * (T::ONE + (v * inv_sqrt2).erf());
                        let pdf = c * (-(v * v) * half).exp();
                        d * (cdf + v * pdf)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), data).expect("shape"));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = xv.iter().zip(dy).map(|(&v, &d)| if v > T::ZERO { d } else { T::ZERO }).collect();
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), data).expect("shape"));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let data = xv.iter().zip(dy).map(|(&v, &d)| if v > T::ZERO { d } else { d * *slope }).collect();
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), data).expect("shape"));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let qs = self.shape(*q);
                let (batch, n, d) = (qs[0], qs[1], qs[2]);
                let m = self.shape(*k)[1];
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let vv = self.value(*v).data();
                let mut gq = vec![T::ZERO; qv.len()];
                let mut gk = vec![T::ZERO; kv.len()];
                let mut gv = vec![T::ZERO; vv.len()];
                let mut dp = vec![T::ZERO; n * m];
                for b in 0..batch {
                    for h in 0..*heads {
                        let p = &probs[(b * heads + h) * n * m..][..n * m];
                        let off_q = b * n * d + h * dh;
                        let off_k = b * m * d + h * dh;
                        let doh = MatRef::strided(&dy[off_q..], n, dh, d, 1);
                        let qh = MatRef::strided(&qv[off_q..], n, dh, d, 1);
                        let kh = MatRef::strided(&kv[off_k..], m, dh, d, 1);
                        let vh = MatRef::strided(&vv[off_k..], m, dh, d, 1);
                        gemm(MatRef::new(p, n, m).t(), doh, T::ONE, &mut gv[off_k..], d, 1);
                        gemm(doh, vh.t(), T::ZERO, &mut dp, m, 1);
                        for (prow, drow) in p.chunks(m).zip(dp.chunks_mut(m)) {
                            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        let ds = MatRef::new(&dp, n, m);
                        gemm(ds, kh, T::ONE, &mut gq[off_q..], d, 1);
                        gemm(ds.t(), qh, T::ONE, &mut gk[off_k..], d, 1);
                    }
                }
                self.accumulate(grads, *q, Tensor::from_vec(qs, gq).expect("shape"));
                self.accumulate(grads, *k, Tensor::from_vec(self.shape(*k), gk).expect("shape"));
                self.accumulate(grads, *v, Tensor::from_vec(self.shape(*v), gv).expect("shape"));
            }
            Op::TokensToMap(x) => {
                let xs = self.shape(*x);
                let mut g = Tensor::zeros(xs);
                transpose_batched(dy, g.data_mut(), xs[0], xs[2], xs[1]);
                self.accumulate(grads, *x, g);
            }
            Op::MapToTokens(x) => {
                let xs = self.shape(*x);
                let mut g = Tensor::zeros(xs);
                transpose_batched(dy, g.data_mut(), xs[0], xs[2] * xs[3], xs[1]);
                self.accumulate(grads, *x, g);
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let hw = sa[2] * sa[3];
                let (pa, pb) = (sa[1] * hw, sb[1] * hw);
                let mut ga = Vec::with_capacity(sa[0] * pa);
                let mut gb = Vec::with_capacity(sa[0] * pb);
                for chunk in dy.chunks(pa + pb) {
                    ga.extend_from_slice(&chunk[..pa]);
                    gb.extend_from_slice(&chunk[pa..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(sa, ga).expect("shape"));
                self.accumulate(grads, *b, Tensor::from_vec(sb, gb).expect("shape"));
            }
            Op::Resize(x) => {
                let xs = self.shape(*x);
                let os = gout.shape();
                let ty = bilinear_taps(xs[2], os[2]);
                let tx = bilinear_taps(xs[3], os[3]);
                let (ihw, ohw) = (xs[2] * xs[3], os[2] * os[3]);
                let mut g = Tensor::zeros(xs);
                for (p, dst) in g.data_mut().chunks_mut(ihw).enumerate() {
                    kernels::resize_plane_backward(&dy[p * ohw..(p + 1) * ohw], dst, xs[3], &ty, &tx);
                }
                self.accumulate(grads, *x, g);
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let data = dy.iter().flat_map(|&d| std::iter::repeat_n(d * inv, hw)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(xs, data).expect("shape"));
            }
            Op::SoftmaxChannels(x) => {
                let ys = gout.shape();
                let (kk, hw) = (ys[1], ys[2] * ys[3]);
                let y = self.nodes[i].value.data();
                let mut g = vec![T::ZERO; y.len()];
                for ((yi, di), gi) in y.chunks(kk * hw).zip(dy.chunks(kk * hw)).zip(g.chunks_mut(kk * hw)) {
                    for p in 0..hw {
                        let dot: T = (0..kk).map(|k| yi[k * hw + p] * di[k * hw + p]).sum();
                        for k in 0..kk {
                            gi[k * hw + p] = yi[k * hw + p] * (di[k * hw + p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(ys, g).expect("shape"));
            }
            Op::SelectToken(x, idx) => {
                let xs = self.shape(*x);
                let (n, d) = (xs[1], xs[2]);
                let mut g = Tensor::zeros(xs);
                for (b, row) in dy.chunks(d).enumerate() {
                    g.data_mut()[(b * n + idx) * d..(b * n + idx + 1) * d].copy_from_slice(row);
                }
                self.accumulate(grads, *x, g);
            }
            Op::NormalizeRows { x, sums } => {
                let k = gout.shape()[1];
                let y = self.nodes[i].value.data();
                let mut g = vec![T::ZERO; y.len()];
                for (r, ((yr, dr), gr)) in y.chunks(k).zip(dy.chunks(k)).zip(g.chunks_mut(k)).enumerate() {
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        gr[j] = (dr[j] - dot) / sums[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), g).expect("shape"));
            }
            Op::BinCenters { w, span } => {
                let k = gout.shape()[1];
                let half = T::from_f64(0.5);
                let mut g = vec![T::ZERO; dy.len()];
                for (dr, gr) in dy.chunks(k).zip(g.chunks_mut(k)) {
                    let mut suffix = T::ZERO;
                    for j in (0..k).rev() {
                        gr[j] = *span * (dr[j] * half + suffix);
                        suffix += dr[j];
                    }
                }
                self.accumulate(grads, *w, Tensor::from_vec(gout.shape(), g).expect("shape"));
            }
            Op::WeightedSum { probs, centers } => {
                let ps = self.shape(*probs);
                let (kk, hw) = (ps[1], ps[2] * ps[3]);
                let pv = self.value(*probs).data();
                let cv = self.value(*centers).data();
                if self.wants(*probs) {
                    let mut g = vec![T::ZERO; pv.len()];
                    for b in 0..ps[0] {
                        let drow = &dy[b * hw..(b + 1) * hw];
                        for k in 0..kk {
                            let c = cv[b * kk + k];
                            for (gv, &d) in g[(b * kk + k) * hw..][..hw].iter_mut().zip(drow) {
                                *gv = d * c;
                            }
                        }
                    }
                    self.accumulate(grads, *probs, Tensor::from_vec(ps, g).expect("shape"));
                }
                if self.wants(*centers) {
                    let mut g = vec![T::ZERO; cv.len()];
                    for b in 0..ps[0] {
                        let drow = &dy[b * hw..(b + 1) * hw];
                        for k in 0..kk {
                            g[b * kk + k] = pv[(b * kk + k) * hw..][..hw].iter().zip(drow).map(|(&p, &d)| p * d).sum();
                        }
                    }
                    self.accumulate(grads, *centers, Tensor::from_vec(self.shape(*centers), g).expect("shape"));
                }
            }
            Op::Silog { pred, coeffs }
            | Op::Chamfer { centers: pred, coeffs }
            | Op::Contract { x: pred, weights: coeffs } => {
                let d = dy[0];
                let data = coeffs.iter().map(|&c| c * d).collect();
                self.accumulate(grads, *pred, Tensor::from_vec(self.shape(*pred), data).expect("shape"));
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T], scale: T) {
    let mut mx = row[0] * scale;
    for &v in row.iter() {
        mx = mx.max(v * scale);
    }
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v * scale - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// Per batch item, `dst[c][r] = src[r][c]` for an `rows x cols` source.
fn transpose_batched<T: Scalar>(src: &[T], dst: &mut [T], batch: usize, rows: usize, cols: usize) {
    let per = rows * cols;
    for b in 0..batch {
        let s = &src[b * per..(b + 1) * per];
        let d = &mut dst[b * per..(b + 1) * per];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
}

/// Value and nearest-neighbour assignments of the mean-normalized
/// bidirectional squared Chamfer distance. Returns `(value, nearest centre
/// for each target, nearest target for each centre)`; ties go to the lower
/// index.
pub fn chamfer_terms<T: Scalar>(centers: &[T], targets: &[T]) -> (T, Vec<usize>, Vec<usize>) {
    let by_value = |v: &[T]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        idx
    };
    let nearest = |sorted: &[usize], pool: &[T], x: T| -> usize {
        let pos = sorted.partition_point(|&j| pool[j] < x);
        let mut best = usize::MAX;
        let mut best_d = T::ZERO;
        // Candidates around the insertion point, with equal values expanded to
        // keep the lowest-index tie rule.
        let lo = pos.saturating_sub(1);
        let hi = (pos + 1).min(sorted.len());
        for &cand in &sorted[lo..hi] {
            let d = (pool[cand] - x) * (pool[cand] - x);
            if best == usize::MAX || d < best_d || (d == best_d && cand < best) {
                best = cand;
                best_d = d;
            }
        }
        // Equal-valued neighbours share one distance; pick the smallest index.
        let v = pool[best];
        let first = sorted.partition_point(|&j| pool[j] < v);
        let mut k = first;
        while k < sorted.len() && pool[sorted[k]] == v {
            best = best.min(sorted[k]);
            k += 1;
        }
        best
    };
    let sc = by_value(centers);
    let st = by_value(targets);
    let fwd: Vec<usize> = targets.iter().map(|&x| nearest(&sc, centers, x)).collect();
    let bwd: Vec<usize> = centers.iter().map(|&c| nearest(&st, targets, c)).collect();
    let f: T = targets.iter().zip(&fwd).map(|(&x, &j)| (x - centers[j]) * (x - centers[j])).sum();
    let b: T = centers.iter().zip(&bwd).map(|(&c, &i)| (c - targets[i]) * (c - targets[i])).sum();
    let value = f / T::from_f64(targets.len() as f64) + b / T::from_f64(centers.len() as f64);
    (value, fwd, bwd)
}
