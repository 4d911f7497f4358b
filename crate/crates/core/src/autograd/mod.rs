//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates gradients for nodes that
//! require them. Parameters enter the tape through [`Tape::param`] and their
//! gradients are collected by [`Grads::params`].

pub(crate) mod kernels;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{strides, Tensor};
use kernels::{broadcast_strides, for_each_strided, ConvGeom};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    ClampMin(Var, f64),
    Broadcast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    SumLast(Var),
    SumAll(Var),
    SoftmaxLast(Var),
    LayerNormLast {
        x: Var,
        rstd: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Dwt(Var),
    Idwt(Var),
    PadHw(Var),
    AvgPool(Var, usize),
    Upsample(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records parameter gradients.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape for inference: nothing requires gradients.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&self, v: Var) -> Tensor {
        self.value(v).clone()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient can be read back with [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        if self.grad_enabled {
            self.params.push((v, id));
        }
        v
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a + b` with `b` broadcast to the shape of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape);
        self.add(a, bb)
    }

    /// `a * b` with `b` broadcast to the shape of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape);
        self.mul(a, bb)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => kernels::gelu,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Softplus => kernels::softplus,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Abs => f64::abs,
        };
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, Op::Unary(a, kind), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// `max(a, floor)`; gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(t, Op::ClampMin(a, floor), rg)
    }

    // ---- shape ops ---------------------------------------------------

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.value(a);
        if src.shape() == shape {
            return a;
        }
        let st = broadcast_strides(src.shape(), shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", src.shape()));
        let mut out = vec![0.0; shape.iter().product()];
        let sd = src.data();
        for_each_strided(shape, &st, 0, |o, s| out[o] = sd[s]);
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::Broadcast(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(perm.len(), src.shape().len());
        let st = strides(src.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| src.shape()[p]).collect();
        let out_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let mut out = vec![0.0; src.len()];
        let sd = src.data();
        for_each_strided(&out_shape, &out_strides, 0, |o, s| out[o] = sd[s]);
        let rg = self.rg(a);
        self.push(Tensor::new(&out_shape, out), Op::Permute(a, perm.to_vec()), rg)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let shape = src.shape();
        assert!(start + len <= shape[axis], "slice out of range");
        let st = strides(shape);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = vec![0.0; out_shape.iter().product()];
        let sd = src.data();
        for_each_strided(&out_shape, &st, start * st[axis], |o, s| out[o] = sd[s]);
        let rg = self.rg(a);
        self.push(Tensor::new(&out_shape, out), Op::Slice { x: a, axis, start }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len());
            assert!(
                s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch"
            );
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&out_shape, out), Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Flat gather: `out[i] = a.flat[idx[i]]`, output shape `[idx.len()]`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let sd = self.value(a).data();
        let out: Vec<f64> = idx.iter().map(|&i| sd[i]).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(&[idx.len()], out), Op::Gather(a, idx), rg)
    }

    /// Zero-pads the last two dimensions at the bottom/right.
    pub fn pad_hw(&mut self, a: Var, new_h: usize, new_w: usize) -> Var {
        let src = self.value(a);
        let shape = src.shape();
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if h == new_h && w == new_w {
            return a;
        }
        assert!(new_h >= h && new_w >= w);
        let planes: usize = shape[..r - 2].iter().product();
        let mut out = vec![0.0; planes * new_h * new_w];
        let sd = src.data();
        for p in 0..planes {
            for y in 0..h {
                let s = p * h * w + y * w;
                let d = p * new_h * new_w + y * new_w;
                out[d..d + w].copy_from_slice(&sd[s..s + w]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[r - 2] = new_h;
        out_shape[r - 1] = new_w;
        let rg = self.rg(a);
        self.push(Tensor::new(&out_shape, out), Op::PadHw(a), rg)
    }

    /// Crops the last two dimensions to their top-left `h×w` corner.
    pub fn crop_hw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let r = self.shape(a).len();
        let a = if self.shape(a)[r - 2] != h {
            self.slice(a, r - 2, 0, h)
        } else {
            a
        };
        if self.shape(a)[r - 1] != w {
            self.slice(a, r - 1, 0, w)
        } else {
            a
        }
    }

    pub fn avg_pool(&mut self, a: Var, s: usize) -> Var {
        let src = self.value(a);
        let shape = src.shape();
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        assert!(h % s == 0 && w % s == 0, "pool factor must divide spatial dims");
        let (oh, ow) = (h / s, w / s);
        let planes: usize = shape[..r - 2].iter().product();
        let mut out = vec![0.0; planes * oh * ow];
        let sd = src.data();
        let inv = 1.0 / (s * s) as f64;
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    out[p * oh * ow + (y / s) * ow + x / s] += sd[p * h * w + y * w + x] * inv;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let rg = self.rg(a);
        self.push(Tensor::new(&out_shape, out), Op::AvgPool(a, s), rg)
    }

    pub fn upsample_nearest(&mut self, a: Var, s: usize) -> Var {
        let t = upsample_nearest(self.value(a), s);
        let rg = self.rg(a);
        self.push(t, Op::Upsample(a, s), rg)
    }

    // ---- reductions --------------------------------------------------

    /// Sums over the last dimension, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let shape = src.shape();
        let n = *shape.last().unwrap();
        let out: Vec<f64> = src.data().chunks(n).map(|c| c.iter().sum()).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&out_shape, out), Op::SumLast(a), rg)
    }

    pub fn mean_last(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let s = self.sum_last(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = *src.shape().last().unwrap();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(src.shape(), out);
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxLast(a), rg)
    }

    /// Normalizes over the last dimension (no affine part).
    pub fn layer_norm_last(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let n = *src.shape().last().unwrap();
        let mut out = src.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(src.shape(), out);
        let rg = self.rg(a);
        self.push(t, Op::LayerNormLast { x: a, rstd }, rg)
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched `op(a)·op(b)` over the last two dims. `b` is either rank 2
    /// (shared across the batch) or has the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() >= 2 && sb.len() >= 2);
        let ra = sa.len();
        let (m, k) = if ta {
            (sa[ra - 1], sa[ra - 2])
        } else {
            (sa[ra - 2], sa[ra - 1])
        };
        let rb = sb.len();
        let (kb, n) = if tb {
            (sb[rb - 1], sb[rb - 2])
        } else {
            (sb[rb - 2], sb[rb - 1])
        };
        assert_eq!(k, kb, "matmul inner dims differ: {sa:?} x {sb:?}");
        let batch: usize = sa[..ra - 2].iter().product();
        let shared = rb == 2;
        if !shared {
            assert_eq!(&sa[..ra - 2], &sb[..rb - 2], "matmul batch dims differ");
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ai = &va.data()[i * m * k..(i + 1) * m * k];
            let bi = if shared {
                vb.data()
            } else {
                &vb.data()[i * k * n..(i + 1) * k * n]
            };
            kernels::gemm(m, k, n, ai, ta, bi, tb, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, out), Op::MatMul { a, b, ta, tb }, rg)
    }

    /// 2-D convolution: `x` is `[B,C,H,W]`, `w` is `[O,C,kh,kw]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        assert_eq!(sx.len(), 4);
        assert_eq!(sw.len(), 4);
        assert_eq!(sx[1], sw[1], "conv input channels {sx:?} vs weight {sw:?}");
        let (bsz, o) = (sx[0], sw[0]);
        let g = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad);
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let in_sz = g.c * g.h * g.w;
        let mut out = vec![0.0; bsz * o * cols_n];
        let mut cols = vec![0.0; rows * cols_n];
        for bi in 0..bsz {
            kernels::im2col(&vx.data()[bi * in_sz..(bi + 1) * in_sz], &g, &mut cols);
            let ob = &mut out[bi * o * cols_n..(bi + 1) * o * cols_n];
            kernels::gemm(o, rows, cols_n, vw.data(), false, &cols, false, ob, 0.0);
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            assert_eq!(bd.len(), o);
            for (i, plane) in out.chunks_mut(cols_n).enumerate() {
                let bias = bd[i % o];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(&[bsz, o, g.ho, g.wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        )
    }

    /// Single-level orthonormal Haar analysis over the last two dims.
    /// `[..., H, W]` becomes `[4, ..., H/2, W/2]` (LL, LH, HL, HH).
    pub fn dwt(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let shape = src.shape();
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        assert!(h % 2 == 0 && w % 2 == 0, "dwt needs even spatial dims");
        let planes: usize = shape[..r - 2].iter().product();
        let out = kernels::haar_forward(src.data(), planes, h, w);
        let mut out_shape = vec![4];
        out_shape.extend_from_slice(&shape[..r - 2]);
        out_shape.push(h / 2);
        out_shape.push(w / 2);
        let rg = self.rg(a);
        self.push(Tensor::new(&out_shape, out), Op::Dwt(a), rg)
    }

    /// Inverse of [`Tape::dwt`].
    pub fn idwt(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let shape = src.shape();
        assert_eq!(shape[0], 4, "idwt expects a leading band axis of 4");
        let r = shape.len();
        let (hh, hw) = (shape[r - 2], shape[r - 1]);
        let planes: usize = shape[1..r - 2].iter().product();
        let out = kernels::haar_inverse(src.data(), planes, 2 * hh, 2 * hw);
        let mut out_shape = shape[1..r - 2].to_vec();
        out_shape.push(2 * hh);
        out_shape.push(2 * hw);
        let rg = self.rg(a);
        self.push(Tensor::new(&out_shape, out), Op::Idwt(a), rg)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, zip_map(g, vb, |g, y| g * y));
                }
                if self.rg(*b) {
                    acc(*b, zip_map(g, va, |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.rg(*a) {
                    acc(*a, zip_map(g, vb, |g, y| g / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out/b
                    let out = &node.value;
                    let d = gd
                        .iter()
                        .zip(out.data())
                        .zip(vb.data())
                        .map(|((g, o), y)| -g * o / y)
                        .collect();
                    acc(*b, Tensor::new(vb.shape(), d));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d: Vec<f64> = match kind {
                    Unary::Gelu => gd.iter().zip(x).map(|(g, &x)| g * kernels::gelu_grad(x)).collect(),
                    Unary::Sigmoid => gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Tanh => gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Softplus => gd.iter().zip(x).map(|(g, &x)| g * kernels::sigmoid(x)).collect(),
                    Unary::Exp => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => gd.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Sqrt => gd
                        .iter()
                        .zip(y)
                        .map(|(g, &y)| if y > 0.0 { g * 0.5 / y } else { 0.0 })
                        .collect(),
                    Unary::Square => gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                    Unary::Abs => gd.iter().zip(x).map(|(g, &x)| g * sign(x)).collect(),
                };
                acc(*a, Tensor::new(g.shape(), d));
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a);
                acc(*a, zip_map(g, x, |g, x| if x > *floor { g } else { 0.0 }));
            }
            Op::Broadcast(a) => {
                let src_shape = self.shape(*a);
                let st = broadcast_strides(src_shape, g.shape()).unwrap();
                let mut d = vec![0.0; src_shape.iter().product()];
                for_each_strided(g.shape(), &st, 0, |o, s| d[s] += gd[o]);
                acc(*a, Tensor::new(src_shape, d));
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a))),
            Op::Permute(a, perm) => {
                let src_shape = self.shape(*a);
                let st = strides(src_shape);
                let out_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let mut d = vec![0.0; gd.len()];
                for_each_strided(g.shape(), &out_strides, 0, |o, s| d[s] = gd[o]);
                acc(*a, Tensor::new(src_shape, d));
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let st = strides(src_shape);
                let mut d = vec![0.0; src_shape.iter().product()];
                for_each_strided(g.shape(), &st, start * st[*axis], |o, s| d[s] = gd[o]);
                acc(*x, Tensor::new(src_shape, d));
            }
            Op::Concat(parts, axis) => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let chunk = ps[*axis] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        acc(p, Tensor::new(ps, d));
                    }
                    offset += chunk;
                }
            }
            Op::Gather(a, idx) => {
                let src_shape = self.shape(*a);
                let mut d = vec![0.0; src_shape.iter().product()];
                for (gv, &ix) in gd.iter().zip(idx) {
                    d[ix] += gv;
                }
                acc(*a, Tensor::new(src_shape, d));
            }
            Op::PadHw(a) => {
                let src_shape = self.shape(*a);
                let r = src_shape.len();
                let (h, w) = (src_shape[r - 2], src_shape[r - 1]);
                let (nh, nw) = (g.shape()[r - 2], g.shape()[r - 1]);
                let planes: usize = src_shape[..r - 2].iter().product();
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        let s = p * nh * nw + y * nw;
                        d[p * h * w + y * w..p * h * w + y * w + w].copy_from_slice(&gd[s..s + w]);
                    }
                }
                acc(*a, Tensor::new(src_shape, d));
            }
            Op::AvgPool(a, s) => {
                let src_shape = self.shape(*a);
                let r = src_shape.len();
                let (h, w) = (src_shape[r - 2], src_shape[r - 1]);
                let (oh, ow) = (h / s, w / s);
                let planes: usize = src_shape[..r - 2].iter().product();
                let inv = 1.0 / (s * s) as f64;
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        for x in 0..w {
                            d[p * h * w + y * w + x] = gd[p * oh * ow + (y / s) * ow + x / s] * inv;
                        }
                    }
                }
                acc(*a, Tensor::new(src_shape, d));
            }
            Op::Upsample(a, s) => {
                let src_shape = self.shape(*a);
                let r = src_shape.len();
                let (h, w) = (src_shape[r - 2], src_shape[r - 1]);
                let (uh, uw) = (h * s, w * s);
                let planes: usize = src_shape[..r - 2].iter().product();
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..uh {
                        for x in 0..uw {
                            d[p * h * w + (y / s) * w + x / s] += gd[p * uh * uw + y * uw + x];
                        }
                    }
                }
                acc(*a, Tensor::new(src_shape, d));
            }
            Op::SumLast(a) => {
                let src_shape = self.shape(*a);
                let n = *src_shape.last().unwrap();
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                acc(*a, Tensor::new(src_shape, d));
            }
            Op::SumAll(a) => {
                let src_shape = self.shape(*a);
                acc(*a, Tensor::full(src_shape, gd[0]));
            }
            Op::SoftmaxLast(a) => {
                let y = node.value.data();
                let n = *g.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::new(g.shape(), d));
            }
            Op::LayerNormLast { x, rstd } => {
                let y = node.value.data();
                let n = *g.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for (r, ((dr, yr), gr)) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dr[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                acc(*x, Tensor::new(g.shape(), d));
            }
            Op::MatMul { a, b, ta, tb } => self.matmul_backward(*a, *b, *ta, *tb, g, &mut acc),
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(*x, *w, *b, *stride, *pad, g, &mut acc),
            Op::Dwt(a) => {
                // orthonormal: adjoint equals inverse
                let src_shape = self.shape(*a);
                let r = src_shape.len();
                let (h, w) = (src_shape[r - 2], src_shape[r - 1]);
                let planes: usize = src_shape[..r - 2].iter().product();
                acc(*a, Tensor::new(src_shape, kernels::haar_inverse(gd, planes, h, w)));
            }
            Op::Idwt(a) => {
                let src_shape = self.shape(*a);
                let r = g.shape().len();
                let (h, w) = (g.shape()[r - 2], g.shape()[r - 1]);
                let planes: usize = g.shape()[..r - 2].iter().product();
                acc(*a, Tensor::new(src_shape, kernels::haar_forward(gd, planes, h, w)));
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor, acc: &mut impl FnMut(Var, Tensor)) {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let ra = sa.len();
        let (m, k) = if ta {
            (sa[ra - 1], sa[ra - 2])
        } else {
            (sa[ra - 2], sa[ra - 1])
        };
        let rb = sb.len();
        let n = if tb { sb[rb - 2] } else { sb[rb - 1] };
        let batch: usize = sa[..ra - 2].iter().product();
        let shared = rb == 2;
        let gd = g.data();
        if self.rg(a) {
            let mut d = vec![0.0; va.len()];
            for i in 0..batch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let bi = if shared {
                    vb.data()
                } else {
                    &vb.data()[i * k * n..(i + 1) * k * n]
                };
                let di = &mut d[i * m * k..(i + 1) * m * k];
                if ta {
                    // dA (stored k×m) = op(B) · dCᵀ
                    kernels::gemm(k, n, m, bi, tb, gi, true, di, 0.0);
                } else {
                    // dA (m×k) = dC · op(B)ᵀ
                    kernels::gemm(m, n, k, gi, false, bi, !tb, di, 0.0);
                }
            }
            acc(a, Tensor::new(sa, d));
        }
        if self.rg(b) {
            let mut d = vec![0.0; vb.len()];
            for i in 0..batch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ai = &va.data()[i * m * k..(i + 1) * m * k];
                let (di, beta) = if shared {
                    (&mut d[..], if i == 0 { 0.0 } else { 1.0 })
                } else {
                    (&mut d[i * k * n..(i + 1) * k * n], 0.0)
                };
                if tb {
                    // dB (stored n×k) = dCᵀ · op(A)
                    kernels::gemm(n, m, k, gi, true, ai, ta, di, beta);
                } else {
                    // dB (k×n) = op(A)ᵀ · dC
                    kernels::gemm(k, m, n, ai, !ta, gi, false, di, beta);
                }
            }
            acc(b, Tensor::new(sb, d));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        acc: &mut impl FnMut(Var, Tensor),
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        let (bsz, o) = (sx[0], sw[0]);
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad);
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_sz = geom.c * geom.h * geom.w;
        let gd = g.data();
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![0.0; o];
                for (i, plane) in gd.chunks(cols_n).enumerate() {
                    db[i % o] += plane.iter().sum::<f64>();
                }
                acc(b, Tensor::new(&[o], db));
            }
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        if !need_w && !need_x {
            return;
        }
        let mut cols = vec![0.0; rows * cols_n];
        let mut dw = if need_w { vec![0.0; vw.len()] } else { Vec::new() };
        let mut dx = if need_x { vec![0.0; vx.len()] } else { Vec::new() };
        let mut dcols = if need_x { vec![0.0; rows * cols_n] } else { Vec::new() };
        for bi in 0..bsz {
            let gb = &gd[bi * o * cols_n..(bi + 1) * o * cols_n];
            if need_w {
                kernels::im2col(&vx.data()[bi * in_sz..(bi + 1) * in_sz], &geom, &mut cols);
                kernels::gemm(o, cols_n, rows, gb, false, &cols, true, &mut dw, 1.0);
            }
            if need_x {
                kernels::gemm(rows, o, cols_n, vw.data(), true, gb, false, &mut dcols, 0.0);
                kernels::col2im_add(&dcols, &geom, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
            }
        }
        if need_w {
            acc(w, Tensor::new(sw, dw));
        }
        if need_x {
            acc(x, Tensor::new(sx, dx));
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Grads {
    /// Gradient with respect to a node, if it required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients, summed over every use of each parameter.
    pub fn params(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for &(v, id) in &self.params {
            if let Some(g) = self.wrt(v) {
                match &mut out[id.index()] {
                    Some(t) => t.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

pub(crate) fn upsample_nearest(t: &Tensor, s: usize) -> Tensor {
    let shape = t.shape();
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let (uh, uw) = (h * s, w * s);
    let planes: usize = shape[..r - 2].iter().product();
    let mut out = vec![0.0; planes * uh * uw];
    let sd = t.data();
    for p in 0..planes {
        for y in 0..uh {
            for x in 0..uw {
                out[p * uh * uw + y * uw + x] = sd[p * h * w + (y / s) * w + x / s];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[r - 2] = uh;
    out_shape[r - 1] = uw;
    Tensor::new(&out_shape, out)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), d)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
