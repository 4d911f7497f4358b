//! Learned image codec: transforms, quantization, entropy coding and the
//! end-to-end compress/decompress pipeline around ALTC.

pub mod bitstream;
pub mod entropy;
pub mod model;
pub mod range_coder;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use bitstream::{Bitstream, Header};
pub use entropy::{estimate_rate, ChannelTable, EntropyModel, FrozenTables};
pub use model::{ForwardVars, HquicModel, LATENT_STRIDE};

use crate::altc::{self, IlluminationEstimate, SideInfo, TransmissionMap};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::image::{pad_to_multiple, unpad, ImageTensor, OriginalDims};
use crate::tensor::Tensor;
use crate::tone::LAMBDA_GRID;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in `[−½, ½)`.
    Train,
    /// Round half away from zero.
    Eval,
}

pub fn quantize(y: &Tensor, mode: QuantMode, seed: u64) -> Tensor {
    match mode {
        QuantMode::Eval => y.map(f64::round),
        QuantMode::Train => {
            let noise = uniform_noise(y.shape(), seed);
            let mut out = y.clone();
            out.add_assign(&noise);
            out
        }
    }
}

/// Seeded `U[−½, ½)` noise tensor.
pub fn uniform_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() - 0.5).collect())
}

/// Per-call switches for [`encode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompressOptions {
    /// Apply ALTC when the model has estimators; off forces the ablation path.
    pub altc: bool,
}

impl Default for CompressOptions {
    fn default() -> Self {
        CompressOptions { altc: true }
    }
}

/// A compressed image plus the encoder-side quantities tests and reports use.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// Quantized latents, `[M, h, w]`.
    pub latents: Vec<i32>,
    pub latent_shape: [usize; 3],
    /// `Σ −log₂ p(ŷ)` under the continuous entropy model.
    pub model_bits: f64,
    pub padded: OriginalDims,
}

impl Encoded {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bitstream.to_bytes()
    }

    /// Total bits over original pixels, header and side info included.
    pub fn bpp(&self) -> f64 {
        let h = &self.bitstream.header;
        (self.bitstream.len_bytes() * 8) as f64 / (h.height as usize * h.width as usize) as f64
    }
}

pub fn lambda_index(lambda: f64) -> u8 {
    LAMBDA_GRID
        .iter()
        .position(|&l| (l - lambda).abs() < 1e-12)
        .map_or(bitstream::OFF_GRID, |i| i as u8)
}

fn latents_to_i32(y: &Tensor) -> Result<Vec<i32>> {
    y.data()
        .iter()
        .map(|&v| {
            if v.is_finite() && v.abs() < (1u64 << 30) as f64 {
                Ok(v as i32)
            } else {
                Err(Error::Range(format!("latent value {v} cannot be entropy coded")))
            }
        })
        .collect()
}

pub fn encode(model: &HquicModel, x: &ImageTensor, opts: CompressOptions) -> Result<Encoded> {
    let cfg = model.config();
    let tables = model.tables()?;
    if x.height() > u16::MAX as usize || x.width() > u16::MAX as usize {
        return Err(Error::Dimension(format!(
            "{}×{} exceeds the 65535-pixel container limit",
            x.height(),
            x.width()
        )));
    }
    let (xp, orig) = pad_to_multiple(x, cfg.pad_multiple());
    let padded = OriginalDims {
        height: xp.height(),
        width: xp.width(),
    };
    let use_altc = opts.altc && model.altc_nets().is_some();
    let compressor = cfg.sideinfo.compressor;
    let (x_tilde, side_info) = if use_altc {
        let nets = model.altc_nets().unwrap();
        let a = altc::estimate_illumination(&xp, nets, &model.store);
        let t = altc::estimate_transmission(&xp, nets, &model.store);
        let (_, bytes) = altc::encode_side_info(&a, &t, cfg.altc.downsample, compressor)?;
        // closed loop: correct with exactly what the decoder will see
        let (a_dec, t_dec) = altc::decode_side_info(&bytes, compressor)?;
        (altc::altc_correct(&xp, &a_dec, &t_dec, cfg.altc.t_min)?, bytes)
    } else {
        (xp, Vec::new())
    };

    let mut tape = Tape::inference();
    let xv = tape.constant(x_tilde.to_tensor());
    let y = model.analysis().forward(&mut tape, &model.store, xv)?;
    let y_q = quantize(tape.value(y), QuantMode::Eval, 0);
    let shape = y_q.shape().to_vec();
    let latent_shape = [shape[1], shape[2], shape[3]];
    let yq = tape.constant(y_q.clone());
    let lik = model.entropy().likelihood_var(&mut tape, &model.store, yq);
    let model_bits: f64 = tape.value(lik).data().iter().map(|p| -p.log2()).sum();

    let latents = latents_to_i32(&y_q)?;
    let payload = tables.encode(&latents, latent_shape[1] * latent_shape[2]);
    let bitstream = Bitstream {
        header: Header {
            altc: use_altc,
            compressor,
            height: orig.height as u16,
            width: orig.width as u16,
            lambda_index: lambda_index(cfg.loss.lambda),
            param_hash: model.param_hash(),
        },
        side_info,
        payload,
    };
    Ok(Encoded {
        bitstream,
        latents,
        latent_shape,
        model_bits,
        padded,
    })
}

pub fn compress(model: &HquicModel, x: &ImageTensor) -> Result<Vec<u8>> {
    Ok(encode(model, x, CompressOptions::default())?.to_bytes())
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: ImageTensor,
    pub latents: Vec<i32>,
    pub header: Header,
}

pub fn decode(model: &HquicModel, bytes: &[u8]) -> Result<Decoded> {
    let bs = Bitstream::from_bytes(bytes)?;
    let h = bs.header.clone();
    if h.param_hash != model.param_hash() {
        return Err(Error::Incompatible(format!(
            "bitstream was produced by model {}, loaded model is {}",
            hex(&h.param_hash),
            model.param_hash_hex()
        )));
    }
    let cfg = model.config();
    let tables = model.tables()?;
    let m = cfg.pad_multiple();
    let (hp, wp) = ((h.height as usize).div_ceil(m) * m, (h.width as usize).div_ceil(m) * m);

    let side: Option<(IlluminationEstimate, TransmissionMap)> = if h.altc {
        if model.altc_nets().is_none() {
            return Err(Error::Incompatible("bitstream uses ALTC but the model has none".into()));
        }
        let side = SideInfo::from_bytes(&bs.side_info, h.compressor)?;
        if (side.height as usize, side.width as usize) != (hp, wp) || side.downsample as usize != cfg.altc.downsample {
            return Err(Error::Decode("side info does not match the image geometry".into()));
        }
        Some((side.illumination(), side.transmission()))
    } else {
        if !bs.side_info.is_empty() {
            return Err(Error::Decode("side info present with ALTC off".into()));
        }
        None
    };

    let (lh, lw) = (hp / LATENT_STRIDE, wp / LATENT_STRIDE);
    let latents = tables.decode(&bs.payload, lh * lw)?;
    let channels = tables.channels.len();
    let y = Tensor::new(&[1, channels, lh, lw], latents.iter().map(|&v| v as f64).collect());
    let mut tape = Tape::inference();
    let yv = tape.constant(y);
    let xth = model.synthesis().forward(&mut tape, &model.store, yv)?;
    let x_tilde_hat = ImageTensor::from_tensor(tape.value(xth))?;
    let restored = match side {
        Some((a, t)) => altc::altc_restore(&x_tilde_hat, &a, &t)?,
        None => x_tilde_hat.clamped(),
    };
    let image = unpad(
        &restored,
        OriginalDims {
            height: h.height as usize,
            width: h.width as usize,
        },
    )?;
    Ok(Decoded {
        image,
        latents,
        header: h,
    })
}

pub fn decompress(model: &HquicModel, bytes: &[u8]) -> Result<ImageTensor> {
    Ok(decode(model, bytes)?.image)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
