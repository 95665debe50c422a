//! Inner loops for convolution and resampling, shared by forward and backward.

use crate::tensor::{gemm, MatRef, Scalar};

/// Upper bound on im2col scratch elements per chunk.
const COL_CHUNK: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self { cin, h, w, cout, k, stride, pad, ho, wo })
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_CHUNK / (self.ckk() * self.wo).max(1)).clamp(1, self.ho)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], y0: usize, y1: usize, cols: &mut [T]) {
    let n = (y1 - y0) * g.wo;
    let (k, s, p) = (g.k as isize, g.stride as isize, g.pad as isize);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c as isize * k + ki) * k + kj) as usize;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in y0..y1 {
                    let iy = oy as isize * s + ki - p;
                    let seg = &mut dst[(oy - y0) * g.wo..(oy - y0 + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj - p;
                        *d = if ix < 0 || ix >= g.w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], y0: usize, y1: usize, dx: &mut [T]) {
    let n = (y1 - y0) * g.wo;
    let (k, s, p) = (g.k as isize, g.stride as isize, g.pad as isize);
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c as isize * k + ki) * k + kj) as usize;
                let src = &cols[row * n..(row + 1) * n];
                for oy in y0..y1 {
                    let iy = oy as isize * s + ki - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let seg = &src[(oy - y0) * g.wo..(oy - y0 + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = ox as isize * s + kj - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Single image: `out[cout, ho*wo] = w[cout, cin*k*k] * cols + bias`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let hw = g.ho * g.wo;
    let wm = MatRef::new(w, g.cout, g.ckk());
    if g.is_pointwise() {
        gemm(wm, MatRef::new(x, g.cin, hw), T::ZERO, out, hw, 1);
    } else {
        let rows = g.rows_per_chunk();
        let mut cols = vec![T::ZERO; g.ckk() * rows * g.wo];
        let mut y0 = 0;
        while y0 < g.ho {
            let y1 = (y0 + rows).min(g.ho);
            let n = (y1 - y0) * g.wo;
            im2col(g, x, y0, y1, &mut cols[..g.ckk() * n]);
            gemm(wm, MatRef::new(&cols[..g.ckk() * n], g.ckk(), n), T::ZERO, &mut out[y0 * g.wo..], hw, 1);
            y0 = y1;
        }
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            for v in &mut out[co * hw..(co + 1) * hw] {
                *v += bv;
            }
        }
    }
}

/// Single image backward. Accumulates into `dw`, `db` and (if given) `dx`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let hw = g.ho * g.wo;
    if let Some(db) = db {
        for (co, d) in db.iter_mut().enumerate() {
            *d += dy[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
    }
    let wm = MatRef::new(w, g.cout, g.ckk());
    if g.is_pointwise() {
        let dym = MatRef::new(dy, g.cout, hw);
        if let Some(dw) = dw {
            gemm(dym, MatRef::new(x, g.cin, hw).t(), T::ONE, dw, g.cin, 1);
        }
        if let Some(dx) = dx {
            gemm(wm.t(), dym, T::ONE, dx, hw, 1);
        }
        return;
    }
    let mut dw = dw;
    let mut dx = dx;
    let rows = g.rows_per_chunk();
    let mut cols = vec![T::ZERO; g.ckk() * rows * g.wo];
    let mut dcols = if dx.is_some() { vec![T::ZERO; g.ckk() * rows * g.wo] } else { Vec::new() };
    let mut y0 = 0;
    while y0 < g.ho {
        let y1 = (y0 + rows).min(g.ho);
        let n = (y1 - y0) * g.wo;
        let dyc = MatRef::strided(&dy[y0 * g.wo..], g.cout, n, hw, 1);
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, x, y0, y1, &mut cols[..g.ckk() * n]);
            gemm(dyc, MatRef::new(&cols[..g.ckk() * n], g.ckk(), n).t(), T::ONE, dw, g.ckk(), 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dc = &mut dcols[..g.ckk() * n];
            gemm(wm.t(), dyc, T::ZERO, dc, n, 1);
            col2im(g, dc, y0, y1, dx);
        }
        y0 = y1;
    }
}

/// Non-overlapping transposed convolution (kernel == stride == `k`) for one
/// image. `w` is laid out `[cin, cout, k, k]`.
pub fn conv_transpose_forward<T: Scalar>(
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let hw = h * wd;
    let ckk = cout * k * k;
    let mut y = vec![T::ZERO; ckk * hw];
    gemm(MatRef::new(w, cin, ckk).t(), MatRef::new(x, cin, hw), T::ZERO, &mut y, hw, 1);
    let (oh, ow) = (h * k, wd * k);
    for co in 0..cout {
        let b = bias.map_or(T::ZERO, |b| b[co]);
        for di in 0..k {
            for dj in 0..k {
                let row = &y[((co * k + di) * k + dj) * hw..][..hw];
                for iy in 0..h {
                    let dst = &mut out[co * oh * ow + (iy * k + di) * ow..][..ow];
                    for ix in 0..wd {
                        dst[ix * k + dj] = row[iy * wd + ix] + b;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<T: Scalar>(
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let hw = h * wd;
    let ckk = cout * k * k;
    let (oh, ow) = (h * k, wd * k);
    let mut dy = vec![T::ZERO; ckk * hw];
    for co in 0..cout {
        for di in 0..k {
            for dj in 0..k {
                let row = &mut dy[((co * k + di) * k + dj) * hw..][..hw];
                for iy in 0..h {
                    let src = &dout[co * oh * ow + (iy * k + di) * ow..][..ow];
                    for ix in 0..wd {
                        row[iy * wd + ix] = src[ix * k + dj];
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for (co, d) in db.iter_mut().enumerate() {
            *d += dout[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<T>();
        }
    }
    let dym = MatRef::new(&dy, ckk, hw);
    if let Some(dw) = dw {
        gemm(MatRef::new(x, cin, hw), dym.t(), T::ONE, dw, ckk, 1);
    }
    if let Some(dx) = dx {
        gemm(MatRef::new(w, cin, ckk), dym, T::ONE, dx, hw, 1);
    }
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub fn resize_plane<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    w_in: usize,
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
) {
    let w_out = tx.len();
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        let ly = T::from_f64(ly);
        let r0 = &src[y0 * w_in..(y0 + 1) * w_in];
        let r1 = &src[y1 * w_in..(y1 + 1) * w_in];
        let out = &mut dst[oy * w_out..(oy + 1) * w_out];
        for (o, &(x0, x1, lx)) in out.iter_mut().zip(tx) {
            let lx = T::from_f64(lx);
            let top = r0[x0] * (T::ONE - lx) + r0[x1] * lx;
            let bot = r1[x0] * (T::ONE - lx) + r1[x1] * lx;
            *o = top * (T::ONE - ly) + bot * ly;
        }
    }
}

pub fn resize_plane_backward<T: Scalar>(
    dout: &[T],
    dsrc: &mut [T],
    w_in: usize,
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
) {
    let w_out = tx.len();
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        let ly = T::from_f64(ly);
        let g = &dout[oy * w_out..(oy + 1) * w_out];
        for (&d, &(x0, x1, lx)) in g.iter().zip(tx) {
            let lx = T::from_f64(lx);
            let top = d * (T::ONE - ly);
            let bot = d * ly;
            dsrc[y0 * w_in + x0] += top * (T::ONE - lx);
            dsrc[y0 * w_in + x1] += top * lx;
            dsrc[y1 * w_in + x0] += bot * (T::ONE - lx);
            dsrc[y1 * w_in + x1] += bot * lx;
        }
    }
}
