//! The learned codec: optional ALTC estimators, analysis and synthesis
//! transforms with FBWT blocks, and the factorized entropy model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::entropy::{EntropyModel, FrozenTables};
use crate::altc::{self, AltcNets};
use crate::autograd::{Tape, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fbwt::{pixel_shuffle2, FbwtBlock};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const ALTC_HIDDEN: usize = 16;
/// Total spatial stride of the analysis transform.
pub const LATENT_STRIDE: usize = 16;

/// An FBWT block doubles its input at initialization; the convolution after
/// it starts at half gain so activation scale stays level through the stack.
fn follow_scale(cfg: &Config, conv_index: usize) -> f64 {
    if cfg.fbwt.enabled && conv_index > 0 {
        0.5
    } else {
        1.0
    }
}

/// Four stride-2 `5×5` stages `3→N→N→N→M`; GELU and an FBWT block follow
/// each of the first three.
#[derive(Clone, Debug)]
pub struct Analysis {
    convs: Vec<Conv2d>,
    blocks: Vec<FbwtBlock>,
}

impl Analysis {
    fn new(store: &mut ParamStore, cfg: &Config, rng: &mut ChaCha8Rng) -> Self {
        let (n, m) = (cfg.model.n, cfg.model.m);
        let dims = [3, n, n, n, m];
        let gain = 2f64.sqrt();
        let convs = (0..4)
            .map(|i| {
                let g = if i < 3 { gain } else { 1.0 } * follow_scale(cfg, i);
                Conv2d::new(store, &format!("analysis.conv{i}"), dims[i], dims[i + 1], 5, 2, g, rng)
            })
            .collect();
        let blocks = if cfg.fbwt.enabled {
            (0..3)
                .map(|i| FbwtBlock::new(store, &format!("analysis.fbwt{i}"), n, &cfg.fbwt.block_config(), rng))
                .collect()
        } else {
            Vec::new()
        };
        Analysis { convs, blocks }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(LATENT_STRIDE) || !s[3].is_multiple_of(LATENT_STRIDE) {
            return Err(Error::Shape(format!(
                "analysis expects [B, 3, H, W] with H, W multiples of {LATENT_STRIDE}, got {s:?}"
            )));
        }
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, store, h);
            if i < 3 {
                h = tape.gelu(h);
                if let Some(block) = self.blocks.get(i) {
                    h = block.forward(tape, store, h)?;
                }
            }
        }
        Ok(h)
    }
}

/// Four `3×3` conv + 2× pixel-shuffle stages `M→N→N→N→3`, mirroring
/// [`Analysis`].
#[derive(Clone, Debug)]
pub struct Synthesis {
    convs: Vec<Conv2d>,
    blocks: Vec<FbwtBlock>,
    latent_channels: usize,
}

impl Synthesis {
    fn new(store: &mut ParamStore, cfg: &Config, rng: &mut ChaCha8Rng) -> Self {
        let (n, m) = (cfg.model.n, cfg.model.m);
        let dims = [m, n, n, n, 3];
        let gain = 2f64.sqrt();
        let convs = (0..4)
            .map(|i| {
                let g = if i < 3 { gain } else { 1.0 } * follow_scale(cfg, i);
                Conv2d::new(
                    store,
                    &format!("synthesis.conv{i}"),
                    dims[i],
                    4 * dims[i + 1],
                    3,
                    1,
                    g,
                    rng,
                )
            })
            .collect();
        let blocks = if cfg.fbwt.enabled {
            (0..3)
                .map(|i| FbwtBlock::new(store, &format!("synthesis.fbwt{i}"), n, &cfg.fbwt.block_config(), rng))
                .collect()
        } else {
            Vec::new()
        };
        Synthesis {
            convs,
            blocks,
            latent_channels: m,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let s = tape.shape(y);
        if s.len() != 4 || s[1] != self.latent_channels {
            return Err(Error::Shape(format!(
                "synthesis expects [B, {}, h, w], got {s:?}",
                self.latent_channels
            )));
        }
        let mut h = y;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, store, h);
            h = pixel_shuffle2(tape, h);
            if i < 3 {
                h = tape.gelu(h);
                if let Some(block) = self.blocks.get(i) {
                    h = block.forward(tape, store, h)?;
                }
            }
        }
        Ok(h)
    }
}

/// Intermediate values of one training-mode pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Corrected image fed to the analysis transform.
    pub x_tilde: Var,
    pub y: Var,
    pub y_hat: Var,
    pub likelihoods: Var,
    pub x_tilde_hat: Var,
    /// Reconstruction before the final clamp.
    pub x_hat: Var,
}

#[derive(Clone, Debug)]
pub struct HquicModel {
    config: Config,
    pub store: ParamStore,
    altc: Option<AltcNets>,
    analysis: Analysis,
    synthesis: Synthesis,
    entropy: EntropyModel,
    tables: Option<FrozenTables>,
}

impl HquicModel {
    /// Freshly initialised model; parameter values depend only on `config`
    /// and `seed`.
    pub fn new(config: &Config, seed: u64) -> Result<Self> {
        config.validate_model()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let altc = config
            .altc
            .enabled
            .then(|| AltcNets::new(&mut store, ALTC_HIDDEN, config.altc.t_min, &mut rng));
        let analysis = Analysis::new(&mut store, config, &mut rng);
        let synthesis = Synthesis::new(&mut store, config, &mut rng);
        let entropy = EntropyModel::new(&mut store, "entropy", config.model.m, &mut rng);
        Ok(HquicModel {
            config: config.clone(),
            store,
            altc,
            analysis,
            synthesis,
            entropy,
            tables: None,
        })
    }

    /// Rebuilds a model around saved parameters. Names and shapes must match
    /// the architecture implied by `config`.
    pub fn from_parts(config: &Config, params: Vec<(String, Tensor)>, tables: Option<FrozenTables>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, architecture expects {}",
                params.len(),
                model.store.len()
            )));
        }
        for (name, t) in params {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Incompatible(format!("unexpected parameter '{name}'")))?;
            if model.store.get(id).shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t;
        }
        if let Some(t) = &tables {
            if t.channels.len() != config.model.m {
                return Err(Error::Incompatible("CDF table count does not match model.m".into()));
            }
        }
        model.tables = tables;
        Ok(model)
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Replaces the non-architectural keys (loss, training, tone).
    pub fn set_training_config(&mut self, cfg: &Config) -> Result<()> {
        if cfg.model_fingerprint() != self.config.model_fingerprint() {
            return Err(Error::Incompatible("config changes the model architecture".into()));
        }
        self.config = cfg.clone();
        Ok(())
    }

    pub fn altc_nets(&self) -> Option<&AltcNets> {
        self.altc.as_ref()
    }

    pub fn analysis(&self) -> &Analysis {
        &self.analysis
    }

    pub fn synthesis(&self) -> &Synthesis {
        &self.synthesis
    }

    pub fn entropy(&self) -> &EntropyModel {
        &self.entropy
    }

    /// Tabulates the entropy model for coding. Must be repeated after any
    /// parameter change.
    pub fn freeze(&mut self) {
        self.tables = Some(self.entropy.freeze(&self.store));
    }

    pub fn tables(&self) -> Result<&FrozenTables> {
        self.tables
            .as_ref()
            .ok_or_else(|| Error::Precondition("entropy model has not been frozen".into()))
    }

    pub fn is_frozen(&self) -> bool {
        self.tables.is_some()
    }

    pub(crate) fn invalidate_tables(&mut self) {
        self.tables = None;
    }

    /// First 8 bytes of SHA-256 over parameters, CDF tables and
    /// model-shaping config.
    pub fn param_hash(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        for (name, t) in self.store.iter() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        match &self.tables {
            Some(t) => h.update(t.to_bytes()),
            None => h.update(b"unfrozen"),
        }
        h.update(self.config.model_fingerprint().as_bytes());
        let digest = h.finalize();
        digest[..8].try_into().unwrap()
    }

    pub fn param_hash_hex(&self) -> String {
        self.param_hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Training-mode pass on `x = [B, 3, H, W]`. `noise`, when given, is added
    /// to the latents; otherwise they pass through unquantized.
    pub fn forward(&self, tape: &mut Tape, x: Var, noise: Option<&Tensor>) -> Result<ForwardVars> {
        let store = &self.store;
        let s = tape.shape(x);
        let m = self.config.pad_multiple();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "model expects [B, 3, H, W] with H, W multiples of {m}, got {s:?}"
            )));
        }
        let (x_tilde, restore) = match &self.altc {
            Some(nets) => {
                let s = self.config.altc.downsample;
                let a = nets.illumination(tape, store, x);
                let t = nets.transmission(tape, store, x);
                // the decoder only sees block means of t
                let pooled = tape.avg_pool(t, s);
                let t_side = tape.upsample_nearest(pooled, s);
                let (x_tilde, offset) = altc::correct_var(tape, x, a, t_side);
                (x_tilde, Some((offset, t_side)))
            }
            None => (x, None),
        };
        let y = self.analysis.forward(tape, store, x_tilde)?;
        let y_hat = match noise {
            Some(u) => {
                let u = tape.constant(u.clone());
                tape.add(y, u)
            }
            None => y,
        };
        let likelihoods = self.entropy.likelihood_var(tape, store, y_hat);
        let x_tilde_hat = self.synthesis.forward(tape, store, y_hat)?;
        let x_hat = match restore {
            Some((offset, t_side)) => altc::restore_var(tape, x_tilde_hat, offset, t_side),
            None => x_tilde_hat,
        };
        Ok(ForwardVars {
            x_tilde,
            y,
            y_hat,
            likelihoods,
            x_tilde_hat,
            x_hat,
        })
    }

    pub fn has_fbwt_params(&self) -> bool {
        self.store.iter().any(|(name, _)| name.contains("fbwt"))
    }
}
