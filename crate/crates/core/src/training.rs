//! Rate–distortion training.
//!
//! The objective is `rate + λ·MSE₂₅₅ + β·L_TA`, where the rate is the
//! entropy-model estimate in bits per pixel, the MSE is taken on the
//! unclamped reconstruction, and the tone loss on the corrected image.
//! Every random draw of step `s` comes from a stream keyed by `(seed, s)`,
//! so a resumed run continues exactly where an uninterrupted one would.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::codec::{EntropyModel, HquicModel, LATENT_STRIDE};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::{list_images, load_image, random_crop_with, ImageTensor};
use crate::params::Adam;
use crate::tensor::Tensor;
use crate::tone::tone_loss_var;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossComponents {
    pub rate: f64,
    pub mse255: f64,
    pub lta: f64,
    pub total: f64,
}

/// Scalar loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rate: Var,
    pub mse255: Var,
    pub lta: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossComponents {
        let v = |x: Var| tape.value(x).data()[0];
        LossComponents {
            rate: v(self.rate),
            mse255: v(self.mse255),
            lta: v(self.lta),
            total: v(self.total),
        }
    }
}

/// Builds the full objective for `x = [B, 3, H, W]`.
pub fn loss_graph(model: &HquicModel, tape: &mut Tape, x: Var, noise: Option<&Tensor>) -> Result<LossVars> {
    let cfg = model.config();
    let s = tape.shape(x).to_vec();
    let pixels = (s[0] * s[2] * s[3]) as f64;
    let fwd = model.forward(tape, x, noise)?;
    let bits = EntropyModel::bits_var(tape, fwd.likelihoods);
    let rate = tape.scale(bits, 1.0 / pixels);
    let diff = tape.sub(fwd.x_hat, x);
    let sq = tape.square(diff);
    let mse = tape.mean_all(sq);
    let mse255 = tape.scale(mse, 255.0 * 255.0);
    let lta = tone_loss_var(tape, fwd.x_tilde, &cfg.trim())?;
    let weighted_d = tape.scale(mse255, cfg.loss.lambda);
    let weighted_t = tape.scale(lta, cfg.loss.beta);
    let total = tape.add(rate, weighted_d);
    let total = tape.add(total, weighted_t);
    Ok(LossVars {
        rate,
        mse255,
        lta,
        total,
    })
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Noise tensor for step `step`, or `None` when noise quantization is off.
pub fn step_noise(cfg: &Config, batch: usize, height: usize, width: usize, step: u64) -> Option<Tensor> {
    cfg.train.noise_quant.then(|| {
        let shape = [batch, cfg.model.m, height / LATENT_STRIDE, width / LATENT_STRIDE];
        Tensor::uniform(&shape, -0.5, 0.5, &mut step_rng(cfg.train.seed, 2 * step + 1))
    })
}

/// Model, optimizer and step counter of an ongoing run.
#[derive(Debug)]
pub struct Trainer {
    pub model: HquicModel,
    pub optimizer: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        let model = HquicModel::new(cfg, cfg.train.seed)?;
        let optimizer = Adam::new(&model.store, cfg.train.lr);
        Ok(Trainer {
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(path: impl AsRef<Path>, cfg: &Config) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let mut model = ck.model;
        model.set_training_config(cfg)?;
        let optimizer = ck.optimizer.unwrap_or_else(|| Adam::new(&model.store, cfg.train.lr));
        Ok(Trainer {
            model,
            optimizer,
            step: ck.step,
        })
    }

    /// One optimizer update on `batch = [B, 3, H, W]`.
    pub fn step(&mut self, batch: &Tensor) -> Result<LossComponents> {
        let s = batch.shape();
        let noise = step_noise(self.model.config(), s[0], s[2], s[3], self.step);
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let loss = loss_graph(&self.model, &mut tape, x, noise.as_ref())?;
        let values = loss.values(&tape);
        let finite = [values.rate, values.mse255, values.lta, values.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "rate={} mse255={} lta={} total={}",
                    values.rate, values.mse255, values.lta, values.total
                ),
            });
        }
        let grads = tape.backward(loss.total).params(&self.model.store);
        if let Some(bad) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite()))
        {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "gradient of {}",
                    self.model.store.name(self.model.store.ids().nth(bad.0).unwrap())
                ),
            });
        }
        self.optimizer.lr = self.model.config().train.lr;
        self.optimizer.update(&mut self.model.store, &grads);
        self.model.invalidate_tables();
        self.step += 1;
        Ok(values)
    }
}

/// In-memory training images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let images = list_images(dir)?.iter().map(load_image).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { images })
    }

    pub fn check(&self, cfg: &Config) -> Result<()> {
        let t = &cfg.train;
        if self.images.len() < t.batch_size {
            return Err(Error::Config(format!(
                "dataset has {} images, batch size is {}",
                self.images.len(),
                t.batch_size
            )));
        }
        if let Some(small) = self.images.iter().find(|i| i.height() < t.crop || i.width() < t.crop) {
            return Err(Error::Config(format!(
                "image {}×{} is smaller than the {} crop",
                small.height(),
                small.width(),
                t.crop
            )));
        }
        Ok(())
    }

    /// Batch for `step`: a seeded per-epoch permutation, walked in order and
    /// wrapping at the end, with one seeded random crop per image.
    pub fn batch(&self, cfg: &Config, step: u64) -> Result<Tensor> {
        let t = &cfg.train;
        let n = self.images.len();
        let per_epoch = n.div_ceil(t.batch_size) as u64;
        let epoch = step / per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut step_rng(t.seed, (1 << 62) + epoch));
        let start = (step % per_epoch) as usize * t.batch_size;
        let mut rng = step_rng(t.seed, 2 * step);
        let crops = (0..t.batch_size)
            .map(|i| random_crop_with(&self.images[order[(start + i) % n]], t.crop, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        ImageTensor::batch(&crops)
    }
}

/// Where a run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: impl AsRef<Path>, stem: &str) -> Self {
        let dir = dir.as_ref();
        RunPaths {
            checkpoint: dir.join(format!("{stem}.hqck")),
            metrics: dir.join(format!("{stem}.csv")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub paths: RunPaths,
    pub history: Vec<LossComponents>,
    pub final_step: u64,
}

#[derive(Serialize)]
struct MetricsRow {
    step: u64,
    rate: f64,
    mse255: f64,
    lta: f64,
    total: f64,
}

/// Trains up to `cfg.train.steps` total steps, optionally continuing from
/// `resume`. Metrics are appended one row per step; the frozen model and
/// optimizer state are checkpointed at the end.
pub fn train_model(data: &Dataset, cfg: &Config, paths: &RunPaths, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    data.check(cfg)?;
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(p, cfg)?,
        None => Trainer::new(cfg)?,
    };
    let fresh = resume.is_none() || !paths.metrics.exists();
    if let Some(dir) = paths.metrics.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&paths.metrics)
        .map_err(|e| Error::io(&paths.metrics, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let csv_err = |e: csv::Error| Error::io(&paths.metrics, std::io::Error::other(e));

    let mut history = Vec::new();
    while trainer.step < cfg.train.steps {
        let batch = data.batch(cfg, trainer.step)?;
        let step = trainer.step;
        let c = trainer.step(&batch)?;
        log.serialize(MetricsRow {
            step,
            rate: c.rate,
            mse255: c.mse255,
            lta: c.lta,
            total: c.total,
        })
        .map_err(csv_err)?;
        history.push(c);
    }
    log.flush().map_err(|e| Error::io(&paths.metrics, e))?;
    trainer.model.freeze();
    checkpoint::save(
        &paths.checkpoint,
        &trainer.model,
        Some(&trainer.optimizer),
        trainer.step,
    )?;
    Ok(TrainReport {
        paths: paths.clone(),
        history,
        final_step: trainer.step,
    })
}

/// One model per λ with otherwise identical settings. Outputs are named
/// `lambda_<value>.hqck` / `.csv` inside `out_dir`.
pub fn rd_sweep(data: &Dataset, lambdas: &[f64], cfg: &Config, out_dir: &Path) -> Result<Vec<TrainReport>> {
    if lambdas.len() < 2 {
        return Err(Error::Config("a sweep needs at least two λ values".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    lambdas
        .iter()
        .map(|&lambda| {
            let mut c = cfg.clone();
            c.loss.lambda = lambda;
            train_model(data, &c, &RunPaths::in_dir(out_dir, &format!("lambda_{lambda}")), None)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> Config {
        let mut c = Config::default();
        c.model.n = 8;
        c.model.m = 8;
        c.fbwt.heads = 2;
        c.train.crop = 32;
        c.train.batch_size = 2;
        c.train.lr = 1e-3;
        c
    }

    fn synthetic(n: usize, size: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| {
                let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
                let data = (0..3 * size * size)
                    .map(|i| (base[i / (size * size)] + 0.1 * rng.gen::<f64>()).min(1.0))
                    .collect();
                ImageTensor::new(size, size, data)
            })
            .collect();
        Dataset { images }
    }

    #[test]
    fn beta_zero_total_is_plain_rd_lagrangian() {
        let mut cfg = tiny_config();
        cfg.loss.beta = 0.0;
        let mut trainer = Trainer::new(&cfg).unwrap();
        let data = synthetic(2, 32, 1);
        let c = trainer.step(&data.batch(&cfg, 0).unwrap()).unwrap();
        assert_eq!(c.total, c.rate + cfg.loss.lambda * c.mse255);
        assert!(c.rate >= 0.0 && c.mse255 >= 0.0 && c.lta >= 0.0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = tiny_config();
        cfg.train.lr = 0.0;
        let mut trainer = Trainer::new(&cfg).unwrap();
        let before = trainer.model.store.clone();
        let data = synthetic(2, 32, 2);
        trainer.step(&data.batch(&cfg, 0).unwrap()).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(trainer.model.store.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batches_are_seed_deterministic_and_cover_the_epoch() {
        let cfg = tiny_config();
        let data = synthetic(5, 40, 3);
        assert_eq!(data.batch(&cfg, 7).unwrap(), data.batch(&cfg, 7).unwrap());
        assert_ne!(data.batch(&cfg, 7).unwrap(), data.batch(&cfg, 8).unwrap());
        assert_eq!(data.batch(&cfg, 0).unwrap().shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn undersized_datasets_are_config_errors() {
        let cfg = tiny_config();
        assert!(matches!(synthetic(1, 32, 4).check(&cfg), Err(Error::Config(_))));
        assert!(matches!(synthetic(4, 24, 4).check(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn noise_follows_the_flag() {
        let mut cfg = tiny_config();
        assert!(step_noise(&cfg, 1, 32, 32, 0).is_some());
        assert_ne!(step_noise(&cfg, 1, 32, 32, 0), step_noise(&cfg, 1, 32, 32, 1));
        cfg.train.noise_quant = false;
        assert!(step_noise(&cfg, 1, 32, 32, 0).is_none());
    }

    #[test]
    fn sweep_needs_two_lambdas() {
        let dir = tempfile::tempdir().unwrap();
        let r = rd_sweep(&synthetic(2, 32, 5), &[0.01], &tiny_config(), dir.path());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
