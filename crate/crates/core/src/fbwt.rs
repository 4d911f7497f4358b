//! Frequency-based weighted transformer block.
//!
//! A feature map is split by a single-level Haar DWT into LL, LH, HL and HH
//! bands. Each band goes through its own windowed-attention expert, the
//! results are weighted by a gating network, merged back to the input shape
//! and added to the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{kernels, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    /// Inverse DWT over the weighted expert outputs.
    #[default]
    Idwt,
    /// Channel concat, 1×1 projection and 2× pixel shuffle.
    Concat,
}

impl MergeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "idwt" => Ok(MergeMode::Idwt),
            "concat" => Ok(MergeMode::Concat),
            other => Err(Error::Config(format!("unknown fbwt.merge_mode '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::Idwt => "idwt",
            MergeMode::Concat => "concat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FbwtConfig {
    pub window: usize,
    pub heads: usize,
    pub merge_mode: MergeMode,
}

impl Default for FbwtConfig {
    fn default() -> Self {
        FbwtConfig {
            window: 4,
            heads: 4,
            merge_mode: MergeMode::Idwt,
        }
    }
}

/// The four Haar bands of a `C×H×W` map, each `C×H/2×W/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl SubBands {
    pub fn bands(&self) -> [&Tensor; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }
}

pub fn dwt2d(f: &Tensor) -> Result<SubBands> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("dwt2d expects C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("dwt2d needs even dims, got {h}×{w}")));
    }
    let out = kernels::haar_forward(f.data(), c, h, w);
    let n = c * (h / 2) * (w / 2);
    let band = |i: usize| Tensor::new(&[c, h / 2, w / 2], out[i * n..(i + 1) * n].to_vec());
    Ok(SubBands {
        ll: band(0),
        lh: band(1),
        hl: band(2),
        hh: band(3),
    })
}

pub fn idwt2d(sb: &SubBands) -> Result<Tensor> {
    let s = sb.ll.shape().to_vec();
    if s.len() != 3 || sb.bands().iter().any(|b| b.shape() != s.as_slice()) {
        return Err(Error::Shape("sub-bands must share one C×h×w shape".into()));
    }
    let mut flat = Vec::with_capacity(4 * sb.ll.len());
    for b in sb.bands() {
        flat.extend_from_slice(b.data());
    }
    let out = kernels::haar_inverse(&flat, s[0], 2 * s[1], 2 * s[2]);
    Ok(Tensor::new(&[s[0], 2 * s[1], 2 * s[2]], out))
}

/// Softmax gate output in LL, LH, HL, HH order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateWeights(pub [f64; 4]);

/// Windowed multi-head self-attention followed by a GELU feed-forward layer,
/// both pre-normalised and residual.
#[derive(Clone, Debug)]
pub struct Expert {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    channels: usize,
    window: usize,
    heads: usize,
}

impl Expert {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, cfg: &FbwtConfig, rng: &mut R) -> Self {
        assert!(
            cfg.heads > 0 && channels.is_multiple_of(cfg.heads),
            "{channels} channels not divisible into {} heads",
            cfg.heads
        );
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let hidden = 2 * channels;
        Expert {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), channels),
            qkv: Linear::new(
                store,
                &format!("{name}.qkv"),
                channels,
                3 * channels,
                std(channels),
                rng,
            ),
            proj: Linear::new(
                store,
                &format!("{name}.proj"),
                channels,
                channels,
                0.5 * std(channels),
                rng,
            ),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), channels),
            ff1: Linear::new(store, &format!("{name}.ff1"), channels, hidden, std(channels), rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), hidden, channels, 0.5 * std(hidden), rng),
            channels,
            window: cfg.window,
            heads: cfg.heads,
        }
    }

    /// Zeroes both residual branches, making the expert the identity.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.proj.zero(store);
        self.ff2.zero(store);
    }

    /// `[B, C, h, w]` to the same shape. Sizes not divisible by the window
    /// are zero-padded at the bottom/right and cropped afterwards.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let s = tape.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c, self.channels);
        let win = self.window;
        let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
        let (nh, nw) = (hp / win, wp / win);
        let nwin = b * nh * nw;
        let t = win * win;

        let padded = tape.pad_hw(x, hp, wp);
        let hwc = tape.permute(padded, &[0, 2, 3, 1]);
        let split = tape.reshape(hwc, &[b, nh, win, nw, win, c]);
        let grouped = tape.permute(split, &[0, 1, 3, 2, 4, 5]);
        let tokens = tape.reshape(grouped, &[nwin, t, c]);

        let mask = (hp != h || wp != w).then(|| padding_mask(b, nh, nw, win, h, w, self.heads));
        let attn = self.attention(tape, store, tokens, nwin, t, mask);
        let tokens = tape.add(tokens, attn);
        let normed = self.ln2.forward(tape, store, tokens);
        let hidden = self.ff1.forward(tape, store, normed);
        let hidden = tape.gelu(hidden);
        let ff = self.ff2.forward(tape, store, hidden);
        let tokens = tape.add(tokens, ff);

        let split = tape.reshape(tokens, &[b, nh, nw, win, win, c]);
        let ungrouped = tape.permute(split, &[0, 1, 3, 2, 4, 5]);
        let hwc = tape.reshape(ungrouped, &[b, hp, wp, c]);
        let chw = tape.permute(hwc, &[0, 3, 1, 2]);
        tape.crop_hw(chw, h, w)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        nwin: usize,
        t: usize,
        mask: Option<Tensor>,
    ) -> Var {
        let (c, heads) = (self.channels, self.heads);
        let dh = c / heads;
        let normed = self.ln1.forward(tape, store, tokens);
        let qkv = self.qkv.forward(tape, store, normed);
        let qkv = tape.reshape(qkv, &[nwin, t, 3, heads, dh]);
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4]);
        let mut split = [0, 1, 2].map(|i| {
            let part = tape.slice(qkv, 0, i, 1);
            tape.reshape(part, &[nwin * heads, t, dh])
        });
        split[0] = tape.scale(split[0], 1.0 / (dh as f64).sqrt());
        let [q, k, v] = split;
        let mut scores = tape.matmul(q, k, false, true);
        if let Some(mask) = mask {
            let mask = tape.constant(mask);
            scores = tape.add(scores, mask);
        }
        let weights = tape.softmax_last(scores);
        let mixed = tape.matmul(weights, v, false, false);
        let mixed = tape.reshape(mixed, &[nwin, heads, t, dh]);
        let mixed = tape.permute(mixed, &[0, 2, 1, 3]);
        let mixed = tape.reshape(mixed, &[nwin, t, c]);
        self.proj.forward(tape, store, mixed)
    }
}

/// Additive score bias `[windows·heads, T, T]` that hides padded key
/// positions, so outputs at real positions do not depend on the padding.
fn padding_mask(b: usize, nh: usize, nw: usize, win: usize, h: usize, w: usize, heads: usize) -> Tensor {
    let t = win * win;
    let mut data = Vec::with_capacity(b * nh * nw * heads * t * t);
    for _ in 0..b {
        for i in 0..nh {
            for j in 0..nw {
                let row: Vec<f64> = (0..t)
                    .map(|k| {
                        let (r, c) = (i * win + k / win, j * win + k % win);
                        if r < h && c < w {
                            0.0
                        } else {
                            -1e9
                        }
                    })
                    .collect();
                for _ in 0..heads * t {
                    data.extend_from_slice(&row);
                }
            }
        }
    }
    Tensor::new(&[b * nh * nw * heads, t, t], data)
}

#[derive(Clone, Debug)]
pub struct FbwtBlock {
    gate: Linear,
    experts: [Expert; 4],
    merge_proj: Option<Conv2d>,
    channels: usize,
    pub merge_mode: MergeMode,
}

impl FbwtBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, cfg: &FbwtConfig, rng: &mut R) -> Self {
        let gate = Linear::new(store, &format!("{name}.gate"), channels, 4, 0.0, rng);
        let experts = ["ll", "lh", "hl", "hh"].map(|b| Expert::new(store, &format!("{name}.{b}"), channels, cfg, rng));
        let merge_proj = match cfg.merge_mode {
            MergeMode::Idwt => None,
            MergeMode::Concat => Some(Conv2d::new(
                store,
                &format!("{name}.merge"),
                4 * channels,
                4 * channels,
                1,
                1,
                1.0,
                rng,
            )),
        };
        FbwtBlock {
            gate,
            experts,
            merge_proj,
            channels,
            merge_mode: cfg.merge_mode,
        }
    }

    pub fn experts(&self) -> &[Expert; 4] {
        &self.experts
    }

    pub fn gate_layer(&self) -> &Linear {
        &self.gate
    }

    /// Gate weights `[B, 4]` for `f = [B, C, H, W]`.
    pub fn gate_weights(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Var {
        let pooled = global_avg_pool(tape, f);
        let logits = self.gate.forward(tape, store, pooled);
        tape.softmax_last(logits)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        self.forward_with(tape, store, f, None)
    }

    /// As [`FbwtBlock::forward`], optionally replacing the gate output with
    /// fixed weights.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f: Var,
        forced: Option<GateWeights>,
    ) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape(format!(
                "fbwt block expects [B, {}, H, W], got {s:?}",
                self.channels
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("fbwt block needs even dims, got {h}×{w}")));
        }
        let (hh, hw) = (h / 2, w / 2);
        let gates = match forced {
            Some(GateWeights(g)) => {
                let rows: Vec<f64> = (0..b).flat_map(|_| g).collect();
                tape.constant(Tensor::new(&[b, 4], rows))
            }
            None => self.gate_weights(tape, store, f),
        };
        let bands = tape.dwt(f);
        let mut weighted = Vec::with_capacity(4);
        for (i, expert) in self.experts.iter().enumerate() {
            let band = tape.slice(bands, 0, i, 1);
            let band = tape.reshape(band, &[b, c, hh, hw]);
            let out = expert.forward(tape, store, band);
            let gi = tape.slice(gates, 1, i, 1);
            let gi = tape.reshape(gi, &[b, 1, 1, 1]);
            let gi = tape.broadcast(gi, &[b, c, hh, hw]);
            let gi = tape.scale(gi, 4.0);
            weighted.push(tape.mul(out, gi));
        }
        let v = match &self.merge_proj {
            None => {
                let stacked: Vec<Var> = weighted.iter().map(|&x| tape.reshape(x, &[1, b, c, hh, hw])).collect();
                let all = tape.concat(&stacked, 0);
                tape.idwt(all)
            }
            Some(proj) => {
                let cat = tape.concat(&weighted, 1);
                let mixed = proj.forward(tape, store, cat);
                pixel_shuffle2(tape, mixed)
            }
        };
        Ok(tape.add(f, v))
    }

    /// Inference on a single `C×H×W` map.
    pub fn apply(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let s = f.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected C×H×W, got {s:?}")));
        }
        let x = tape.constant(f.clone().reshape(&[1, s[0], s[1], s[2]]));
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.take_value(y).reshape(s))
    }

    pub fn gate(&self, store: &ParamStore, f: &Tensor) -> GateWeights {
        let mut tape = Tape::inference();
        let s = f.shape();
        let x = tape.constant(f.clone().reshape(&[1, s[0], s[1], s[2]]));
        let g = self.gate_weights(&mut tape, store, x);
        let d = tape.value(g).data();
        GateWeights([d[0], d[1], d[2], d[3]])
    }
}

/// `[B, 4C, h, w]` to `[B, C, 2h, 2w]`; channel `4c + 2i + j` lands at
/// offset `(i, j)` of each 2×2 output cell.
pub fn pixel_shuffle2(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let (b, c4, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(c4 % 4, 0);
    let c = c4 / 4;
    let split = tape.reshape(x, &[b, c, 2, 2, h, w]);
    let moved = tape.permute(split, &[0, 1, 4, 2, 5, 3]);
    tape.reshape(moved, &[b, c, 2 * h, 2 * w])
}
