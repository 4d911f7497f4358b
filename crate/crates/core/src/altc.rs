//! Adaptive lighting and tone correction.
//!
//! The underwater formation model `I = J·t + A·(1 − t)` is inverted before
//! encoding (`x̃ = (x − A(1 − t)) / t`) and re-applied after decoding
//! (`x̂ = A(1 − t) + x̃̂·t`). `A` is one background-light value per channel;
//! `t` is a per-pixel, per-channel transmission map bounded below by `t_min`.
//! Both are estimated by small networks and shipped to the decoder as
//! quantized side information.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{global_avg_pool, Conv2d, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_T_MIN: f64 = 0.05;
pub const DEFAULT_SIDE_DOWNSAMPLE: usize = 16;

/// Per-channel global background light, each component in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IlluminationEstimate([f64; 3]);

impl IlluminationEstimate {
    pub fn new(a: [f64; 3]) -> Result<Self> {
        if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("illumination {a:?} outside [0,1]")));
        }
        Ok(IlluminationEstimate(a))
    }

    #[inline]
    pub fn values(&self) -> [f64; 3] {
        self.0
    }
}

/// Transmission map of shape 3×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl TransmissionMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * height * width);
        TransmissionMap { height, width, data }
    }

    pub fn constant(height: usize, width: usize, t: f64) -> Self {
        Self::new(height, width, vec![t; 3 * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone())
    }
}

/// Lossless byte compressor applied to the quantized transmission map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SideInfoCompressor {
    #[default]
    Zlib,
    Stored,
}

impl SideInfoCompressor {
    pub fn id(self) -> u8 {
        match self {
            SideInfoCompressor::Zlib => 0,
            SideInfoCompressor::Stored => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(SideInfoCompressor::Zlib),
            1 => Ok(SideInfoCompressor::Stored),
            other => Err(Error::Decode(format!("unknown side-info compressor id {other}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zlib" => Ok(SideInfoCompressor::Zlib),
            "stored" => Ok(SideInfoCompressor::Stored),
            other => Err(Error::Config(format!("unknown side-info compressor '{other}'"))),
        }
    }

    fn compress(self, raw: &[u8]) -> Vec<u8> {
        match self {
            SideInfoCompressor::Stored => raw.to_vec(),
            SideInfoCompressor::Zlib => {
                let mut enc = flate2::write::ZlibEncoder::new(Vec::new(), flate2::Compression::best());
                enc.write_all(raw).expect("in-memory write");
                enc.finish().expect("in-memory write")
            }
        }
    }

    fn decompress(self, data: &[u8], expected: usize) -> Result<Vec<u8>> {
        let out = match self {
            SideInfoCompressor::Stored => data.to_vec(),
            SideInfoCompressor::Zlib => {
                let mut out = Vec::with_capacity(expected);
                flate2::read::ZlibDecoder::new(data)
                    .take(expected as u64 + 1)
                    .read_to_end(&mut out)
                    .map_err(|e| Error::Decode(format!("side-info inflate failed: {e}")))?;
                out
            }
        };
        if out.len() != expected {
            return Err(Error::Decode(format!(
                "side-info map has {} bytes, expected {expected}",
                out.len()
            )));
        }
        Ok(out)
    }
}

/// Quantized side information as carried in the bitstream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SideInfo {
    pub downsample: u8,
    pub height: u16,
    pub width: u16,
    pub a_q: [u16; 3],
    /// 3 × (H/s) × (W/s) transmission levels.
    pub t_q: Vec<u8>,
}

impl SideInfo {
    fn grid(&self) -> (usize, usize) {
        let s = self.downsample as usize;
        (self.height as usize / s, self.width as usize / s)
    }

    pub fn illumination(&self) -> IlluminationEstimate {
        IlluminationEstimate(self.a_q.map(|q| q as f64 / 65535.0))
    }

    /// Dequantized map, nearest-neighbour upsampled to full resolution.
    pub fn transmission(&self) -> TransmissionMap {
        let s = self.downsample as usize;
        let (gh, gw) = self.grid();
        let (h, w) = (self.height as usize, self.width as usize);
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(self.t_q[(c * gh + y / s) * gw + x / s] as f64 / 255.0);
                }
            }
        }
        TransmissionMap::new(h, w, data)
    }

    /// `[s:u8][H:u16][W:u16][A_q:3×u16][len:u32][compressed t_q]`, little-endian.
    pub fn to_bytes(&self, compressor: SideInfoCompressor) -> Vec<u8> {
        let payload = compressor.compress(&self.t_q);
        let mut out = Vec::with_capacity(15 + payload.len());
        out.push(self.downsample);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        for a in self.a_q {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], compressor: SideInfoCompressor) -> Result<Self> {
        const HEAD: usize = 1 + 2 + 2 + 6 + 4;
        if bytes.len() < HEAD {
            return Err(Error::Decode("side info truncated".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let downsample = bytes[0];
        let height = u16_at(1);
        let width = u16_at(3);
        let a_q = [u16_at(5), u16_at(7), u16_at(9)];
        let len = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
        if bytes.len() != HEAD + len {
            return Err(Error::Decode(format!(
                "side info length {} does not match declared payload {len}",
                bytes.len()
            )));
        }
        let s = downsample as usize;
        if s == 0 || !(height as usize).is_multiple_of(s) || !(width as usize).is_multiple_of(s) {
            return Err(Error::Decode(format!(
                "side info downsample {s} incompatible with {height}×{width}"
            )));
        }
        let expected = 3 * (height as usize / s) * (width as usize / s);
        let t_q = compressor.decompress(&bytes[HEAD..], expected)?;
        Ok(SideInfo {
            downsample,
            height,
            width,
            a_q,
            t_q,
        })
    }
}

/// Quantizes `A` to 16-bit and the `s×s` block means of `t` to 8-bit.
pub fn quantize_side_info(a: &IlluminationEstimate, t: &TransmissionMap, s: usize) -> Result<SideInfo> {
    if s == 0 || s > 255 || !t.height.is_multiple_of(s) || !t.width.is_multiple_of(s) {
        return Err(Error::Precondition(format!(
            "downsample factor {s} must divide {}×{}",
            t.height, t.width
        )));
    }
    if t.height > u16::MAX as usize || t.width > u16::MAX as usize {
        return Err(Error::Dimension("image too large for side info".into()));
    }
    let (gh, gw) = (t.height / s, t.width / s);
    let mut pooled = vec![0.0; 3 * gh * gw];
    for c in 0..3 {
        for y in 0..t.height {
            for x in 0..t.width {
                pooled[(c * gh + y / s) * gw + x / s] += t.data[(c * t.height + y) * t.width + x];
            }
        }
    }
    let inv = 1.0 / (s * s) as f64;
    let t_q = pooled
        .iter()
        .map(|v| (v * inv * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(SideInfo {
        downsample: s as u8,
        height: t.height as u16,
        width: t.width as u16,
        a_q: a.0.map(|v| (v * 65535.0).round().clamp(0.0, 65535.0) as u16),
        t_q,
    })
}

pub fn encode_side_info(
    a: &IlluminationEstimate,
    t: &TransmissionMap,
    s: usize,
    compressor: SideInfoCompressor,
) -> Result<(SideInfo, Vec<u8>)> {
    let side = quantize_side_info(a, t, s)?;
    let bytes = side.to_bytes(compressor);
    Ok((side, bytes))
}

pub fn decode_side_info(
    bytes: &[u8],
    compressor: SideInfoCompressor,
) -> Result<(IlluminationEstimate, TransmissionMap)> {
    let side = SideInfo::from_bytes(bytes, compressor)?;
    Ok((side.illumination(), side.transmission()))
}

fn check_dims(x: &ImageTensor, t: &TransmissionMap) -> Result<()> {
    if x.height() != t.height || x.width() != t.width {
        return Err(Error::Shape(format!(
            "image {}×{} vs transmission {}×{}",
            x.height(),
            x.width(),
            t.height,
            t.width
        )));
    }
    Ok(())
}

/// `x̃ = (x − A(1 − t)) / t`, unclamped.
pub fn altc_correct(x: &ImageTensor, a: &IlluminationEstimate, t: &TransmissionMap, t_min: f64) -> Result<ImageTensor> {
    check_dims(x, t)?;
    if t.data.iter().any(|&v| !(v >= t_min)) {
        return Err(Error::Domain(format!(
            "transmission below t_min={t_min} (min {})",
            t.min()
        )));
    }
    let n = x.num_pixels();
    let mut out = x.data().to_vec();
    for c in 0..3 {
        let ac = a.0[c];
        for (o, &tv) in out[c * n..(c + 1) * n].iter_mut().zip(&t.data[c * n..(c + 1) * n]) {
            *o = (*o - ac * (1.0 - tv)) / tv;
        }
    }
    Ok(ImageTensor::new(x.height(), x.width(), out))
}

/// `A(1 − t) + x̃̂·t` without the final clamp.
pub fn altc_restore_unclamped(
    x_tilde_hat: &ImageTensor,
    a: &IlluminationEstimate,
    t: &TransmissionMap,
) -> Result<ImageTensor> {
    check_dims(x_tilde_hat, t)?;
    let n = x_tilde_hat.num_pixels();
    let mut out = x_tilde_hat.data().to_vec();
    for c in 0..3 {
        let ac = a.0[c];
        for (o, &tv) in out[c * n..(c + 1) * n].iter_mut().zip(&t.data[c * n..(c + 1) * n]) {
            *o = ac * (1.0 - tv) + *o * tv;
        }
    }
    Ok(ImageTensor::new(x_tilde_hat.height(), x_tilde_hat.width(), out))
}

/// Restoration clamped to `[0, 1]`: the final reconstruction.
pub fn altc_restore(x_tilde_hat: &ImageTensor, a: &IlluminationEstimate, t: &TransmissionMap) -> Result<ImageTensor> {
    Ok(altc_restore_unclamped(x_tilde_hat, a, t)?.clamped())
}

/// Tape form of [`altc_correct`]: `x` is `[B,3,H,W]`, `a` is `[B,3]`,
/// `t` is `[B,3,H,W]`. Returns `(x̃, A(1 − t))` so restoration can reuse
/// the offset term.
pub fn correct_var(tape: &mut Tape, x: Var, a: Var, t: Var) -> (Var, Var) {
    let offset = background_term(tape, a, t);
    let num = tape.sub(x, offset);
    (tape.div(num, t), offset)
}

/// Tape form of [`altc_restore_unclamped`], given the offset from [`correct_var`].
pub fn restore_var(tape: &mut Tape, x_tilde_hat: Var, offset: Var, t: Var) -> Var {
    let scaled = tape.mul(x_tilde_hat, t);
    tape.add(offset, scaled)
}

fn background_term(tape: &mut Tape, a: Var, t: Var) -> Var {
    let shape = tape.shape(t).to_vec();
    let a4 = tape.reshape(a, &[shape[0], 3, 1, 1]);
    let ab = tape.broadcast(a4, &shape);
    let neg = tape.scale(t, -1.0);
    let one_minus_t = tape.add_scalar(neg, 1.0);
    tape.mul(ab, one_minus_t)
}

/// The two estimator networks `E_A` (global light) and `E_t` (transmission).
#[derive(Clone, Debug)]
pub struct AltcNets {
    illum_convs: Vec<Conv2d>,
    illum_head: Linear,
    trans_convs: Vec<Conv2d>,
    pub t_min: f64,
}

impl AltcNets {
    pub fn new<R: Rng>(store: &mut ParamStore, hidden: usize, t_min: f64, rng: &mut R) -> Self {
        let gain = 2f64.sqrt();
        let illum_convs = vec![
            Conv2d::new(store, "altc.illum.conv0", 3, hidden, 3, 2, gain, rng),
            Conv2d::new(store, "altc.illum.conv1", hidden, hidden, 3, 2, gain, rng),
            Conv2d::new(store, "altc.illum.conv2", hidden, hidden, 3, 2, gain, rng),
        ];
        let illum_head = Linear::new(store, "altc.illum.head", hidden, 3, 0.1 / (hidden as f64).sqrt(), rng);
        let trans_convs = vec![
            Conv2d::new(store, "altc.trans.conv0", 3, hidden, 3, 1, gain, rng),
            Conv2d::new(store, "altc.trans.conv1", hidden, hidden, 3, 1, gain, rng),
            Conv2d::new(store, "altc.trans.conv2", hidden, hidden, 3, 1, gain, rng),
            Conv2d::new(store, "altc.trans.conv3", hidden, 3, 3, 1, 0.1, rng),
        ];
        // start close to the identity correction (t ≈ 0.95)
        store.get_mut(trans_convs[3].bias).data_mut().fill(3.0);
        AltcNets {
            illum_convs,
            illum_head,
            trans_convs,
            t_min,
        }
    }

    /// `E_A`: `[B,3,H,W]` to `[B,3]` in `(0,1)`.
    pub fn illumination(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for conv in &self.illum_convs {
            let z = conv.forward(tape, store, h);
            h = tape.gelu(z);
        }
        let pooled = global_avg_pool(tape, h);
        let logits = self.illum_head.forward(tape, store, pooled);
        tape.sigmoid(logits)
    }

    /// `E_t`: `[B,3,H,W]` to `[B,3,H,W]` in `[t_min, 1]`.
    pub fn transmission(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.trans_convs.len() - 1;
        for (i, conv) in self.trans_convs.iter().enumerate() {
            let z = conv.forward(tape, store, h);
            h = if i < last { tape.gelu(z) } else { z };
        }
        let s = tape.sigmoid(h);
        let scaled = tape.scale(s, 1.0 - self.t_min);
        tape.add_scalar(scaled, self.t_min)
    }
}

pub fn estimate_illumination(x: &ImageTensor, nets: &AltcNets, store: &ParamStore) -> IlluminationEstimate {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.to_tensor());
    let a = nets.illumination(&mut tape, store, xv);
    let d = tape.value(a).data();
    IlluminationEstimate([d[0], d[1], d[2]])
}

pub fn estimate_transmission(x: &ImageTensor, nets: &AltcNets, store: &ParamStore) -> TransmissionMap {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.to_tensor());
    let t = nets.transmission(&mut tape, store, xv);
    TransmissionMap::new(x.height(), x.width(), tape.value(t).data().to_vec())
}
