//! Raw numeric kernels shared by the tape's forward and backward passes.

use crate::tensor::strides;

/// `c = op(a) · op(b) + beta·c` with `op(a)` of shape `m×k` and `op(b)` of
/// shape `k×n`. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover m*k, k*n and m*n elements (checked above) and
    // the strides address exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel larger than padded input"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    if g.is_pointwise() {
        cols.copy_from_slice(x);
        return;
    }
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    if g.is_pointwise() {
        for (d, c) in dx.iter_mut().zip(cols) {
            *d += c;
        }
        return;
    }
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Visits every element of `out_shape` in row-major order together with the
/// source offset `base + Σ idx[d]·src_strides[d]`.
pub(crate) fn for_each_strided(
    out_shape: &[usize],
    src_strides: &[usize],
    base: usize,
    mut f: impl FnMut(usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, base);
        return;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut off = base;
    let mut out = 0;
    loop {
        let mut s = off;
        for _ in 0..inner {
            f(out, s);
            out += 1;
            s += inner_stride;
        }
        // advance the outer odometer
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Strides of `src_shape` seen from `out_shape` under numpy broadcasting
/// (broadcast dimensions get stride 0).
pub(crate) fn broadcast_strides(src_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if src_shape.len() > out_shape.len() {
        return None;
    }
    let lead = out_shape.len() - src_shape.len();
    let st = strides(src_shape);
    let mut res = vec![0; out_shape.len()];
    for (i, &d) in src_shape.iter().enumerate() {
        let o = out_shape[lead + i];
        if d == o {
            res[lead + i] = st[i];
        } else if d == 1 {
            res[lead + i] = 0;
        } else {
            return None;
        }
    }
    Some(res)
}

/// Orthonormal single-level Haar analysis of `planes` images of size `h×w`.
/// Output layout is `[4, planes, h/2, w/2]` with bands ordered LL, LH, HL, HH.
pub(crate) fn haar_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (hh, hw) = (h / 2, w / 2);
    let band = planes * hh * hw;
    let mut out = vec![0.0; 4 * band];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..hh {
            for j in 0..hw {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                let o = p * hh * hw + i * hw + j;
                out[o] = 0.5 * (a + b + c + d);
                out[band + o] = 0.5 * (a + b - c - d);
                out[2 * band + o] = 0.5 * (a - b + c - d);
                out[3 * band + o] = 0.5 * (a - b - c + d);
            }
        }
    }
    out
}

/// Inverse of [`haar_forward`]; `x` has layout `[4, planes, h/2, w/2]`.
pub(crate) fn haar_inverse(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (hh, hw) = (h / 2, w / 2);
    let band = planes * hh * hw;
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..hh {
            for j in 0..hw {
                let o = p * hh * hw + i * hw + j;
                let ll = x[o];
                let lh = x[band + o];
                let hl = x[2 * band + o];
                let hh_ = x[3 * band + o];
                dst[2 * i * w + 2 * j] = 0.5 * (ll + lh + hl + hh_);
                dst[2 * i * w + 2 * j + 1] = 0.5 * (ll + lh - hl - hh_);
                dst[(2 * i + 1) * w + 2 * j] = 0.5 * (ll - lh + hl - hh_);
                dst[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (ll - lh - hl + hh_);
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
