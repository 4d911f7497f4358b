//! Small layer building blocks over the tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-padded `k×k` convolution with He-normal weights scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[cout, cin, k, k], gain / fan_in.sqrt(), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Affine map over the last dimension: `x·W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.fan_in, "linear input width");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = tape.reshape(x, &[rows, self.fan_in]);
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x2, w, false, false);
        let y = tape.add_bcast(y, b);
        let mut out = shape;
        *out.last_mut().unwrap() = self.fan_out;
        tape.reshape(y, &out)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm_last(x, 1e-6);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul_bcast(n, g);
        tape.add_bcast(y, b)
    }
}

/// Mean over the two trailing spatial dims: `[B, C, H, W]` to `[B, C]`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]]);
    tape.mean_last(flat)
}
