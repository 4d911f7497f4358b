//! Tone adjustment loss over opponent colour channels.
//!
//! `RG = R − G`, `YB = (R + G)/2 − B`; each map is summarised by a trimmed
//! mean and the loss is the length of the resulting `(μ_RG, μ_YB)` vector.
//! A neutral-toned image has both means at zero.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Rate-distortion trade-offs used for the reference sweep.
pub const LAMBDA_GRID: [f64; 5] = [0.0025, 0.0067, 0.013, 0.025, 0.0483];
pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimConfig {
    pub alpha_l: f64,
    pub alpha_r: f64,
}

impl Default for TrimConfig {
    fn default() -> Self {
        TrimConfig {
            alpha_l: DEFAULT_ALPHA,
            alpha_r: DEFAULT_ALPHA,
        }
    }
}

impl TrimConfig {
    pub fn new(alpha_l: f64, alpha_r: f64) -> Result<Self> {
        let cfg = TrimConfig { alpha_l, alpha_r };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| (0.0..0.5).contains(&a);
        if !ok(self.alpha_l) || !ok(self.alpha_r) {
            return Err(Error::Config(format!(
                "trim fractions ({}, {}) must lie in [0, 0.5)",
                self.alpha_l, self.alpha_r
            )));
        }
        Ok(())
    }

    /// Number of elements dropped from the low and high ends of `k` values.
    pub fn trim_counts(&self, k: usize) -> (usize, usize) {
        let lo = (self.alpha_l * k as f64).floor() as usize;
        let hi = (self.alpha_r * k as f64).floor() as usize;
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpponentChannels {
    pub height: usize,
    pub width: usize,
    pub rg: Vec<f64>,
    pub yb: Vec<f64>,
}

pub fn opponent_channels(x: &ImageTensor) -> OpponentChannels {
    let (r, g, b) = (x.plane(0), x.plane(1), x.plane(2));
    let rg = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let yb = r.iter().zip(g).zip(b).map(|((r, g), b)| 0.5 * (r + g) - b).collect();
    OpponentChannels {
        height: x.height(),
        width: x.width(),
        rg,
        yb,
    }
}

/// Positions of the retained elements after an ascending sort and trim.
/// Ties are broken by index, which fixes the permutation used for gradients.
fn retained_indices(values: &[f64], cfg: &TrimConfig) -> Result<Vec<usize>> {
    let k = values.len();
    let (lo, hi) = cfg.trim_counts(k);
    if k == 0 || lo + hi >= k {
        return Err(Error::Precondition(format!(
            "trimming {lo}+{hi} of {k} values leaves nothing"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    Ok(order[lo..k - hi].to_vec())
}

pub fn trimmed_mean(values: &[f64], cfg: &TrimConfig) -> Result<f64> {
    cfg.validate()?;
    let keep = retained_indices(values, cfg)?;
    Ok(keep.iter().map(|&i| values[i]).sum::<f64>() / keep.len() as f64)
}

pub fn tone_adjustment_loss(x_tilde: &ImageTensor, cfg: &TrimConfig) -> Result<f64> {
    let opp = opponent_channels(x_tilde);
    let mu_rg = trimmed_mean(&opp.rg, cfg)?;
    let mu_yb = trimmed_mean(&opp.yb, cfg)?;
    Ok(mu_rg.hypot(mu_yb))
}

/// Batch-mean tone loss on the tape. `x_tilde` is `[B, 3, H, W]`.
pub fn tone_loss_var(tape: &mut Tape, x_tilde: Var, cfg: &TrimConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(x_tilde).to_vec();
    let (b, k) = (shape[0], shape[2] * shape[3]);
    let r = tape.slice(x_tilde, 1, 0, 1);
    let g = tape.slice(x_tilde, 1, 1, 1);
    let bl = tape.slice(x_tilde, 1, 2, 1);
    let rg = tape.sub(r, g);
    let rpg = tape.add(r, g);
    let half = tape.scale(rpg, 0.5);
    let yb = tape.sub(half, bl);

    let mut per_image = Vec::with_capacity(b);
    for i in 0..b {
        let mut sq = Vec::with_capacity(2);
        for map in [rg, yb] {
            let vals = &tape.value(map).data()[i * k..(i + 1) * k];
            let keep: Vec<usize> = retained_indices(vals, cfg)?.into_iter().map(|j| i * k + j).collect();
            let kept = tape.gather(map, keep);
            let mu = tape.mean_all(kept);
            sq.push(tape.square(mu));
        }
        let s = tape.add(sq[0], sq[1]);
        per_image.push(tape.sqrt(s));
    }
    let all = tape.concat(&per_image, 0);
    Ok(tape.mean_all(all))
}

/// `rate + λ·mse_255 + β·l_ta`.
pub fn total_loss(rate: f64, mse_255: f64, l_ta: f64, lambda: f64, beta: f64) -> f64 {
    rate + lambda * mse_255 + beta * l_ta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(values: &[f64], lo_frac: f64, hi_frac: f64) -> Option<f64> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let k = v.len();
        let lo = (lo_frac * k as f64).floor() as usize;
        let hi = (hi_frac * k as f64).floor() as usize;
        if lo + hi >= k {
            return None;
        }
        let kept = &v[lo..k - hi];
        Some(kept.iter().sum::<f64>() / kept.len() as f64)
    }

    #[test]
    fn opponent_examples() {
        let gray = opponent_channels(&ImageTensor::filled(3, 2, [0.4; 3]));
        assert!(gray.rg.iter().chain(&gray.yb).all(|&v| v == 0.0));
        let red = opponent_channels(&ImageTensor::filled(2, 2, [1.0, 0.0, 0.0]));
        assert!(red.rg.iter().all(|&v| v == 1.0) && red.yb.iter().all(|&v| v == 0.5));
        let o = opponent_channels(&ImageTensor::filled(2, 2, [0.2, 0.4, 0.6]));
        assert!(o.rg.iter().all(|v| (v + 0.2).abs() < 1e-12));
        assert!(o.yb.iter().all(|v| (v + 0.3).abs() < 1e-12));
    }

    #[test]
    fn trimmed_mean_examples() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        let cfg = TrimConfig::new(0.1, 0.1).unwrap();
        assert_eq!(trimmed_mean(&v, &cfg).unwrap(), 4.5);
        let none = TrimConfig::new(0.0, 0.0).unwrap();
        assert_eq!(trimmed_mean(&v, &none).unwrap(), 4.5);
        assert_eq!(
            trimmed_mean(&[3.25; 17], &TrimConfig::new(0.3, 0.45).unwrap()).unwrap(),
            3.25
        );
        assert!(matches!(trimmed_mean(&[], &cfg), Err(Error::Precondition(_))));
    }

    #[test]
    fn trim_config_bounds() {
        assert!(TrimConfig::new(0.5, 0.0).is_err());
        assert!(TrimConfig::new(-0.1, 0.0).is_err());
        assert!(TrimConfig::new(0.49, 0.49).is_ok());
    }

    #[test]
    fn loss_examples() {
        let cfg = TrimConfig::default();
        assert_eq!(
            tone_adjustment_loss(&ImageTensor::filled(4, 4, [0.7; 3]), &cfg).unwrap(),
            0.0
        );
        let red = tone_adjustment_loss(&ImageTensor::filled(4, 4, [1.0, 0.0, 0.0]), &cfg).unwrap();
        assert!((red - 1.25f64.sqrt()).abs() < 1e-12);
        assert!((red - 1.118034).abs() < 1e-6);
        let o = tone_adjustment_loss(&ImageTensor::filled(4, 4, [0.2, 0.4, 0.6]), &cfg).unwrap();
        assert!((o - 0.360555).abs() < 1e-6);
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(2.0, 100.0, 0.5, 0.013, 0.1) - 3.35).abs() < 1e-12);
        assert_eq!(total_loss(1.5, 40.0, 9.0, 0.025, 0.0), 1.5 + 0.025 * 40.0);
        assert_eq!(LAMBDA_GRID, [0.0025, 0.0067, 0.013, 0.025, 0.0483]);
        assert_eq!(DEFAULT_BETA, 0.1);
    }

    #[test]
    fn tape_loss_matches_direct_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imgs: Vec<ImageTensor> = (0..3)
            .map(|_| ImageTensor::new(5, 6, (0..90).map(|_| rng.gen_range(-0.2..1.3)).collect()))
            .collect();
        let cfg = TrimConfig::new(0.15, 0.05).unwrap();
        let direct: f64 = imgs.iter().map(|x| tone_adjustment_loss(x, &cfg).unwrap()).sum::<f64>() / 3.0;
        let mut tape = Tape::inference();
        let xv = tape.constant(ImageTensor::batch(&imgs).unwrap());
        let l = tone_loss_var(&mut tape, xv, &cfg).unwrap();
        assert!((tape.value(l).data()[0] - direct).abs() < 1e-12);
    }

    /// Values on a coarse lattice so an `ε = 1e-3` nudge never swaps ranks.
    fn separated_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        let k = h * w;
        let mut r: Vec<f64> = (0..k).map(|i| 0.1 + 0.02 * i as f64).collect();
        r.shuffle(rng);
        let mut data = r.clone();
        data.extend((0..k).map(|_| rng.gen_range(0.0..0.002)));
        let mut bl: Vec<f64> = (0..k).map(|i| 0.9 - 0.013 * i as f64).collect();
        bl.shuffle(rng);
        data.extend(bl);
        Tensor::new(&[1, 3, h, w], data)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = TrimConfig::default();
        let x0 = separated_image(&mut rng, 5, 6);
        let eval = |x: &Tensor| {
            let img = ImageTensor::from_tensor(x).unwrap();
            tone_adjustment_loss(&img, &cfg).unwrap()
        };
        assert!(eval(&x0) > 1e-3);
        let mut tape = Tape::new();
        let xv = tape.input(x0.clone());
        let l = tone_loss_var(&mut tape, xv, &cfg).unwrap();
        let grads = tape.backward(l);
        let g = grads.wrt(xv).unwrap();
        let eps = 1e-3;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * eps);
            let an = g.data()[i];
            let scale = fd.abs().max(an.abs());
            assert!(
                scale < 1e-12 || (fd - an).abs() / scale < 1e-4,
                "element {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    proptest! {
        #[test]
        fn trimmed_mean_matches_brute_force(
            values in proptest::collection::vec(-5.0f64..5.0, 1..=100),
            al in 0.0f64..0.5,
            ar in 0.0f64..0.5,
        ) {
            let cfg = TrimConfig::new(al, ar).unwrap();
            match brute_force(&values, al, ar) {
                Some(expected) => prop_assert_eq!(trimmed_mean(&values, &cfg).unwrap(), expected),
                None => prop_assert!(trimmed_mean(&values, &cfg).is_err()),
            }
        }

        #[test]
        fn loss_is_nonnegative_and_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
            let k = h * w;
            let x = ImageTensor::new(h, w, (0..3 * k).map(|_| rng.gen_range(-0.5..1.5)).collect());
            let cfg = TrimConfig::new(rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)).unwrap();
            let base = tone_adjustment_loss(&x, &cfg).unwrap();
            prop_assert!(base >= 0.0);

            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let mut shuffled = vec![0.0; 3 * k];
            for c in 0..3 {
                for (dst, &src) in perm.iter().enumerate() {
                    shuffled[c * k + dst] = x.data()[c * k + src];
                }
            }
            let y = ImageTensor::new(h, w, shuffled);
            prop_assert_eq!(tone_adjustment_loss(&y, &cfg).unwrap(), base);
        }

        #[test]
        fn opponent_bounds_hold_on_clamped_inputs(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = ImageTensor::new(3, 3, (0..27).map(|_| rng.gen::<f64>()).collect());
            let o = opponent_channels(&x);
            prop_assert!(o.rg.iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(o.yb.iter().all(|v| (-1.5..=1.0).contains(v)));
        }
    }
}
