//! Fully factorized learned entropy model and its frozen integer tables.
//!
//! Each latent channel has its own monotone cumulative `c(x) = σ(g(x))`,
//! where `g` is a small chain of softplus-positive matrices with tanh gates
//! (filters `1→3→3→3→1`). A symbol's likelihood is `c(ŷ + ½) − c(ŷ − ½)`.
//! At freeze time each channel's distribution is tabulated on an integer
//! support with 16-bit frequencies and one trailing escape symbol.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::range_coder::{RangeDecoder, RangeEncoder};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
pub const PRECISION_BITS: u32 = 16;
const TOTAL: u32 = 1 << PRECISION_BITS;
const HIDDEN: [usize; 3] = [3, 3, 3];
const INIT_SCALE: f64 = 10.0;
const TAIL_MASS: f64 = 1e-6;
const SUPPORT_SCAN: i32 = 512;

#[derive(Clone, Debug)]
pub struct EntropyModel {
    channels: usize,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl EntropyModel {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let dims: Vec<usize> = std::iter::once(1).chain(HIDDEN).chain(std::iter::once(1)).collect();
        let layers = dims.len() - 1;
        let scale = INIT_SCALE.powf(1.0 / layers as f64);
        let (mut matrices, mut biases, mut factors) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..layers {
            let (fin, fout) = (dims[k], dims[k + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln();
            matrices.push(store.add(format!("{name}.matrix{k}"), Tensor::full(&[channels, fout, fin], init)));
            biases.push(store.add(
                format!("{name}.bias{k}"),
                Tensor::uniform(&[channels, fout, 1], -0.5, 0.5, rng),
            ));
            if k + 1 < layers {
                factors.push(store.add(format!("{name}.factor{k}"), Tensor::zeros(&[channels, fout, 1])));
            }
        }
        EntropyModel {
            channels,
            matrices,
            biases,
            factors,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `g` applied to `x = [M, 1, n]`, one parameter set per leading index.
    fn logits_var(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for k in 0..self.matrices.len() {
            let raw = tape.param(store, self.matrices[k]);
            let m = tape.softplus(raw);
            h = tape.matmul(m, h, false, false);
            let b = tape.param(store, self.biases[k]);
            h = tape.add_bcast(h, b);
            if let Some(&f) = self.factors.get(k) {
                let fp = tape.param(store, f);
                let gate = tape.tanh(fp);
                let th = tape.tanh(h);
                let gated = tape.mul_bcast(th, gate);
                h = tape.add(h, gated);
            }
        }
        h
    }

    /// Per-element likelihoods of `y_hat = [B, M, h, w]`, floored.
    pub fn likelihood_var(&self, tape: &mut Tape, store: &ParamStore, y_hat: Var) -> Var {
        let s = tape.shape(y_hat).to_vec();
        assert_eq!(s[1], self.channels, "latent channels");
        let n = s[0] * s[2] * s[3];
        let per_channel = tape.permute(y_hat, &[1, 0, 2, 3]);
        let flat = tape.reshape(per_channel, &[self.channels, 1, n]);
        let lower = tape.add_scalar(flat, -0.5);
        let upper = tape.add_scalar(flat, 0.5);
        let both = tape.concat(&[lower, upper], 2);
        let logits = self.logits_var(tape, store, both);
        let l = tape.slice(logits, 2, 0, n);
        let u = tape.slice(logits, 2, n, n);
        // evaluating on the side of the median where σ is far from 1 keeps precision
        let sign: Vec<f64> = tape
            .value(l)
            .data()
            .iter()
            .zip(tape.value(u).data())
            .map(|(a, b)| if a + b > 0.0 { -1.0 } else { 1.0 })
            .collect();
        let sign = tape.constant(Tensor::new(&[self.channels, 1, n], sign));
        let su = tape.mul(u, sign);
        let sl = tape.mul(l, sign);
        let cu = tape.sigmoid(su);
        let cl = tape.sigmoid(sl);
        let diff = tape.sub(cu, cl);
        let lik = tape.abs(diff);
        let lik = tape.clamp_min(lik, LIKELIHOOD_FLOOR);
        let lik = tape.reshape(lik, &[self.channels, s[0], s[2], s[3]]);
        tape.permute(lik, &[1, 0, 2, 3])
    }

    /// Rate in bits of the likelihoods on the tape.
    pub fn bits_var(tape: &mut Tape, lik: Var) -> Var {
        let ln = tape.ln(lik);
        let total = tape.sum_all(ln);
        tape.scale(total, -1.0 / std::f64::consts::LN_2)
    }

    fn logits_scalar(&self, store: &ParamStore, c: usize, x: f64) -> f64 {
        let mut h = vec![x];
        for k in 0..self.matrices.len() {
            let m = store.get(self.matrices[k]);
            let (fout, fin) = (m.shape()[1], m.shape()[2]);
            let md = &m.data()[c * fout * fin..(c + 1) * fout * fin];
            let bd = &store.get(self.biases[k]).data()[c * fout..(c + 1) * fout];
            let mut next = vec![0.0; fout];
            for (o, v) in next.iter_mut().enumerate() {
                *v = bd[o] + (0..fin).map(|i| softplus(md[o * fin + i]) * h[i]).sum::<f64>();
            }
            if let Some(&f) = self.factors.get(k) {
                let fd = &store.get(f).data()[c * fout..(c + 1) * fout];
                for (o, v) in next.iter_mut().enumerate() {
                    *v += fd[o].tanh() * v.tanh();
                }
            }
            h = next;
        }
        h[0]
    }

    /// Unfloored probability of integer `v` in channel `c`.
    pub fn pmf(&self, store: &ParamStore, c: usize, v: i32) -> f64 {
        let l = self.logits_scalar(store, c, v as f64 - 0.5);
        let u = self.logits_scalar(store, c, v as f64 + 0.5);
        let s = if l + u > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * u) - sigmoid(s * l)).abs()
    }

    pub fn cdf(&self, store: &ParamStore, c: usize, x: f64) -> f64 {
        sigmoid(self.logits_scalar(store, c, x))
    }

    pub fn freeze(&self, store: &ParamStore) -> FrozenTables {
        let channels = (0..self.channels).map(|c| self.freeze_channel(store, c)).collect();
        FrozenTables { channels }
    }

    fn freeze_channel(&self, store: &ParamStore, c: usize) -> ChannelTable {
        let probs: Vec<f64> = (-SUPPORT_SCAN..=SUPPORT_SCAN).map(|v| self.pmf(store, c, v)).collect();
        let half_tail = TAIL_MASS / 2.0;
        let mut acc = 0.0;
        let mut lo_idx = None;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if acc > half_tail {
                lo_idx = Some(i);
                break;
            }
        }
        acc = 0.0;
        let mut hi_idx = None;
        for (i, p) in probs.iter().enumerate().rev() {
            acc += p;
            if acc > half_tail {
                hi_idx = Some(i);
                break;
            }
        }
        let (lo_idx, hi_idx) = match (lo_idx, hi_idx) {
            (Some(l), Some(h)) if l <= h => (l, h),
            _ => (SUPPORT_SCAN as usize, SUPPORT_SCAN as usize),
        };
        let inside = &probs[lo_idx..=hi_idx];
        let escape = (1.0 - inside.iter().sum::<f64>()).max(0.0);
        let mut p: Vec<f64> = inside.to_vec();
        p.push(escape);
        ChannelTable::from_probabilities(lo_idx as i32 - SUPPORT_SCAN, &p)
    }
}

/// Integer table for one channel: symbols `lo..lo+n-1` then the escape symbol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelTable {
    pub lo: i32,
    pub freqs: Vec<u32>,
    #[serde(skip)]
    cum: Vec<u32>,
}

impl ChannelTable {
    pub fn new(lo: i32, freqs: Vec<u32>) -> Result<Self> {
        if freqs.len() < 2 || freqs.contains(&0) || freqs.iter().map(|&f| f as u64).sum::<u64>() != TOTAL as u64 {
            return Err(Error::Decode("invalid frequency table".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0);
        for f in &freqs {
            cum.push(cum.last().unwrap() + f);
        }
        Ok(ChannelTable { lo, freqs, cum })
    }

    /// Rounds `probs` to frequencies summing to 2^16, each at least 1.
    pub fn from_probabilities(lo: i32, probs: &[f64]) -> Self {
        let n = probs.len();
        assert!(n >= 2 && n <= TOTAL as usize);
        let mass: f64 = probs.iter().sum();
        let budget = (TOTAL as usize - n) as f64;
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| 1 + (p / mass.max(f64::MIN_POSITIVE) * budget).floor() as u32)
            .collect();
        let mut deficit = TOTAL - freqs.iter().sum::<u32>();
        // hand leftovers to the largest entries
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut i = 0;
        while deficit > 0 {
            freqs[order[i % n]] += 1;
            deficit -= 1;
            i += 1;
        }
        Self::new(lo, freqs).expect("well-formed table")
    }

    pub fn hi(&self) -> i32 {
        self.lo + self.freqs.len() as i32 - 2
    }

    fn escape(&self) -> usize {
        self.freqs.len() - 1
    }

    /// Ideal code length in bits, including the escape payload.
    pub fn cost_bits(&self, v: i32) -> f64 {
        let bits = |s: usize| PRECISION_BITS as f64 - (self.freqs[s] as f64).log2();
        if (self.lo..=self.hi()).contains(&v) {
            bits((v - self.lo) as usize)
        } else {
            let nb = 64 - (self.escape_distance(v) + 1).leading_zeros();
            bits(self.escape()) + 1.0 + (2 * nb - 1) as f64
        }
    }

    /// Distance past the nearer support edge, minus one.
    fn escape_distance(&self, v: i32) -> u64 {
        let (v, lo, hi) = (v as i64, self.lo as i64, self.hi() as i64);
        (if v < lo { lo - v - 1 } else { v - hi - 1 }) as u64
    }

    fn encode(&self, enc: &mut RangeEncoder, v: i32) {
        if (self.lo..=self.hi()).contains(&v) {
            let s = (v - self.lo) as usize;
            enc.encode(self.cum[s], self.freqs[s], PRECISION_BITS);
            return;
        }
        let e = self.escape();
        enc.encode(self.cum[e], self.freqs[e], PRECISION_BITS);
        enc.encode_bits(u32::from(v > self.hi()), 1);
        // order-0 exp-Golomb of the distance plus one
        let x = self.escape_distance(v) + 1;
        let nb = 64 - x.leading_zeros();
        enc.encode_bits(0, nb - 1);
        for i in (0..nb).rev() {
            enc.encode_bits(((x >> i) & 1) as u32, 1);
        }
    }

    fn decode(&self, dec: &mut RangeDecoder) -> Result<i32> {
        let v = dec.peek(PRECISION_BITS)?;
        let s = self.cum.partition_point(|&c| c <= v) - 1;
        dec.consume(self.cum[s], self.freqs[s])?;
        if s != self.escape() {
            return Ok(self.lo + s as i32);
        }
        let above = dec.decode_bits(1)?;
        let mut zeros = 0;
        while dec.decode_bits(1)? == 0 {
            zeros += 1;
            if zeros > 32 {
                return Err(Error::Decode("escape code too long".into()));
            }
        }
        let mut x: u64 = 1;
        for _ in 0..zeros {
            x = (x << 1) | dec.decode_bits(1)? as u64;
        }
        let d = i64::try_from(x - 1).unwrap();
        let v = if above == 1 {
            self.hi() as i64 + 1 + d
        } else {
            self.lo as i64 - 1 - d
        };
        i32::try_from(v).map_err(|_| Error::Decode("escaped latent out of range".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenTables {
    pub channels: Vec<ChannelTable>,
}

impl FrozenTables {
    /// Restores derived lookup state after deserialization.
    pub fn validated(mut self) -> Result<Self> {
        for t in &mut self.channels {
            *t = ChannelTable::new(t.lo, std::mem::take(&mut t.freqs))?;
        }
        Ok(self)
    }

    /// Canonical byte form used for hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.channels.len() as u32).to_le_bytes());
        for t in &self.channels {
            out.extend_from_slice(&t.lo.to_le_bytes());
            out.extend_from_slice(&(t.freqs.len() as u32).to_le_bytes());
            for f in &t.freqs {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        out
    }

    /// Range-codes `latents` laid out as `[M, h, w]`.
    pub fn encode(&self, latents: &[i32], plane: usize) -> Vec<u8> {
        assert_eq!(latents.len(), self.channels.len() * plane);
        let mut enc = RangeEncoder::new();
        for (c, table) in self.channels.iter().enumerate() {
            debug_assert_eq!(table.cum.len(), table.freqs.len() + 1);
            for &v in &latents[c * plane..(c + 1) * plane] {
                table.encode(&mut enc, v);
            }
        }
        enc.finish()
    }

    pub fn decode(&self, bytes: &[u8], plane: usize) -> Result<Vec<i32>> {
        let mut dec = RangeDecoder::new(bytes)?;
        let mut out = Vec::with_capacity(self.channels.len() * plane);
        for table in &self.channels {
            for _ in 0..plane {
                out.push(table.decode(&mut dec)?);
            }
        }
        Ok(out)
    }

    pub fn cost_bits(&self, latents: &[i32], plane: usize) -> f64 {
        self.channels
            .iter()
            .enumerate()
            .map(|(c, t)| {
                latents[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| t.cost_bits(v))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// `Σ −log₂ p / num_pixels`.
pub fn estimate_rate(likelihoods: &[f64], num_pixels: usize) -> f64 {
    likelihoods.iter().map(|p| -p.log2()).sum::<f64>() / num_pixels as f64
}
