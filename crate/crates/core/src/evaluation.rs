//! Quality metrics, Bjøntegaard deltas, channel statistics and model
//! evaluation through real bitstreams.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::codec::{compress, decompress, HquicModel};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::files::write_atomic;
use crate::image::{list_images, load_image, ImageTensor};

/// Serializes infinite values as the string `"inf"`.
fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) => s.trim().parse().map_err(serde::de::Error::custom),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    #[serde(default = "nan")]
    pub ms_ssim: f64,
}

fn nan() -> f64 {
    f64::NAN
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    MsSsim,
}

impl RdPoint {
    pub fn quality(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Psnr => self.psnr,
            Metric::MsSsim => self.ms_ssim,
        }
    }
}

fn to_8bit_255(img: &ImageTensor) -> Vec<f64> {
    img.quantized_8bit()
        .data()
        .iter()
        .map(|v| (v * 255.0).round())
        .collect()
}

fn check_dims(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::Shape(format!(
            "images differ in size: {}×{} vs {}×{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// MSE on the 8-bit scale after clamping and quantizing both images.
pub fn mse_8bit(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_dims(x, y)?;
    let (a, b) = (to_8bit_255(x), to_8bit_255(y));
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical images give `+∞`.
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    let mse = mse_8bit(x, y)?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    })
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MsSsim {
    pub value: f64,
    /// Scales actually used; fewer than five on small images, with the
    /// leading weights renormalized to sum to one.
    pub scales: usize,
}

/// Scales that fit an image whose shorter side is `min_side`.
pub fn ms_ssim_scales(min_side: usize) -> usize {
    (1..=5)
        .rev()
        .find(|&k| min_side > (SSIM_WINDOW - 1) * (1 << (k - 1)))
        .unwrap_or(0)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of an `h×w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..SSIM_WINDOW).map(|k| g[k] * p[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(i + k) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, h, w, g);
    let (mu_b, _, _) = filter_valid(b, h, w, g);
    let (aa, _, _) = filter_valid(&prod(|x, _| x * x), h, w, g);
    let (bb, _, _) = filter_valid(&prod(|_, y| y * y), h, w, g);
    let (ab, _, _) = filter_valid(&prod(|x, y| x * y), h, w, g);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        cs += c;
        ssim += c * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    }
    (ssim / n, cs / n)
}

fn halve(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let at = |di: usize, dj: usize| p[(2 * i + di) * w + 2 * j + dj];
            out[i * ow + j] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM on 8-bit quantized RGB, averaged over channels at each
/// scale. Negative per-scale terms are clipped at zero so the product stays
/// in `[0, 1]`.
pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor) -> Result<MsSsim> {
    check_dims(x, y)?;
    let scales = ms_ssim_scales(x.height().min(x.width()));
    if scales == 0 {
        return Err(Error::Dimension(format!(
            "MS-SSIM needs images at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
            x.height(),
            x.width()
        )));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let g = gaussian_window();
    let (a, b) = (to_8bit_255(x), to_8bit_255(y));
    let plane = x.height() * x.width();
    let mut planes: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
        .map(|c| {
            (
                a[c * plane..(c + 1) * plane].to_vec(),
                b[c * plane..(c + 1) * plane].to_vec(),
            )
        })
        .collect();
    let (mut h, mut w) = (x.height(), x.width());
    let mut value = 1.0;
    for (k, &wk) in weights.iter().enumerate() {
        let terms: Vec<(f64, f64)> = planes.iter().map(|(pa, pb)| ssim_cs(pa, pb, h, w, &g)).collect();
        let last = k + 1 == scales;
        let term = terms.iter().map(|&(s, c)| if last { s } else { c }).sum::<f64>() / 3.0;
        value *= term.max(0.0).powf(wk / wsum);
        if !last {
            for (pa, pb) in planes.iter_mut() {
                *pa = halve(pa, h, w).0;
                *pb = halve(pb, h, w).0;
            }
            h /= 2;
            w /= 2;
        }
    }
    Ok(MsSsim {
        value: value.min(1.0),
        scales,
    })
}

/// Least-squares cubic `c0 + c1·t + c2·t² + c3·t³` through `(t, v)` pairs.
fn cubic_fit(t: &[f64], v: &[f64]) -> Result<[f64; 4]> {
    let mut a = [[0.0f64; 5]; 4];
    for (&ti, &vi) in t.iter().zip(v) {
        let pows = [1.0, ti, ti * ti, ti * ti * ti];
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += pows[r] * pows[c];
            }
            a[r][4] += pows[r] * vi;
        }
    }
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-12 {
            return Err(Error::Precondition(
                "rate–quality points are degenerate for a cubic fit".into(),
            ));
        }
        a.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..5 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Ok(std::array::from_fn(|i| a[i][4] / a[i][i]))
}

fn cubic_integral(p: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |t: f64| p[0] * t + p[1] * t * t / 2.0 + p[2] * t.powi(3) / 3.0 + p[3] * t.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Bjøntegaard delta rate of `test` against `anchor`, in percent. Negative
/// values mean `test` needs fewer bits for the same quality.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint], metric: Metric) -> Result<f64> {
    for (name, pts) in [("anchor", anchor), ("test", test)] {
        if pts.len() < 4 {
            return Err(Error::Precondition(format!(
                "{name} curve has {} points, need at least 4",
                pts.len()
            )));
        }
        if pts.iter().any(|p| !(p.bpp > 0.0) || !p.quality(metric).is_finite()) {
            return Err(Error::Precondition(format!(
                "{name} curve has non-positive rate or non-finite quality"
            )));
        }
    }
    let range = |pts: &[RdPoint]| {
        pts.iter()
            .map(|p| p.quality(metric))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q), hi.max(q)))
    };
    let (alo, ahi) = range(anchor);
    let (tlo, thi) = range(test);
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if !(hi > lo) {
        return Err(Error::Range(format!(
            "quality ranges [{alo}, {ahi}] and [{tlo}, {thi}] do not overlap"
        )));
    }
    // centre and scale quality for a well-conditioned fit
    let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
    let fit = |pts: &[RdPoint]| {
        let t: Vec<f64> = pts.iter().map(|p| (p.quality(metric) - mid) / half).collect();
        let v: Vec<f64> = pts.iter().map(|p| p.bpp.ln()).collect();
        cubic_fit(&t, &v)
    };
    let (pa, pt) = (fit(anchor)?, fit(test)?);
    let avg = (cubic_integral(&pt, -1.0, 1.0) - cubic_integral(&pa, -1.0, 1.0)) / 2.0;
    Ok(100.0 * avg.exp_m1())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelSummary {
    /// Mean intensity in `[0, 1]`.
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Counts of 8-bit code values.
    pub histogram: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelStats {
    pub images: usize,
    pub pixels: u64,
    /// R, G, B.
    pub channels: [ChannelSummary; 3],
}

fn hist_quantile(hist: &[u64], total: u64, q: f64) -> f64 {
    let rank = ((q * total as f64).ceil() as u64).max(1);
    let mut acc = 0;
    for (v, &n) in hist.iter().enumerate() {
        acc += n;
        if acc >= rank {
            return v as f64 / 255.0;
        }
    }
    1.0
}

/// Per-channel statistics pooled over all pixels of all images. Quantiles
/// use the nearest-rank rule on 8-bit codes.
pub fn channel_stats(images: &[ImageTensor]) -> Result<ChannelStats> {
    if images.is_empty() {
        return Err(Error::Config("no images to summarize".into()));
    }
    let pixels: u64 = images.iter().map(|i| i.num_pixels() as u64).sum();
    let channels = std::array::from_fn(|c| {
        let mut histogram = vec![0u64; 256];
        let mut sum = 0.0;
        for img in images {
            for &v in img.plane(c) {
                sum += v;
                histogram[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
            }
        }
        ChannelSummary {
            mean: sum / pixels as f64,
            q1: hist_quantile(&histogram, pixels, 0.25),
            median: hist_quantile(&histogram, pixels, 0.5),
            q3: hist_quantile(&histogram, pixels, 0.75),
            histogram,
        }
    });
    Ok(ChannelStats {
        images: images.len(),
        pixels,
        channels,
    })
}

/// Loads every image of `dir`; an empty directory is a configuration error.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Config(format!("no images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_image(p)?))
        })
        .collect()
}

pub fn channel_stats_dir(dir: &Path) -> Result<ChannelStats> {
    let images: Vec<ImageTensor> = load_dataset(dir)?.into_iter().map(|(_, i)| i).collect();
    channel_stats(&images)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageEval {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bits: u64,
    pub bpp: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ms_ssim: f64,
    pub ms_ssim_scales: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub crate_version: String,
    pub param_hash: String,
    pub config: Config,
    pub total_bits: u64,
    pub total_pixels: u64,
    /// `bpp` is total bits over total pixels; quality values are per-image
    /// means.
    pub mean: RdPoint,
    pub images: Vec<ImageEval>,
}

/// Compresses and decompresses every image through real bitstreams.
/// `jobs = 0` uses all available cores.
pub fn evaluate_model(model: &HquicModel, images: &[(String, ImageTensor)], jobs: usize) -> Result<EvalReport> {
    if model.tables().is_err() {
        return Err(Error::Precondition("model must be frozen before evaluation".into()));
    }
    let one = |(name, x): &(String, ImageTensor)| -> Result<ImageEval> {
        let bytes = compress(model, x)?;
        let y = decompress(model, &bytes)?;
        let bits = 8 * bytes.len() as u64;
        let ms = ms_ssim(x, &y)?;
        Ok(ImageEval {
            name: name.clone(),
            height: x.height(),
            width: x.width(),
            bits,
            bpp: bits as f64 / x.num_pixels() as f64,
            psnr: psnr(x, &y)?,
            ms_ssim: ms.value,
            ms_ssim_scales: ms.scales,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let per: Vec<ImageEval> = pool.install(|| images.par_iter().map(one).collect::<Result<_>>())?;
    if per.is_empty() {
        return Err(Error::Config("no images to evaluate".into()));
    }
    let total_bits: u64 = per.iter().map(|e| e.bits).sum();
    let total_pixels: u64 = per.iter().map(|e| (e.height * e.width) as u64).sum();
    let n = per.len() as f64;
    Ok(EvalReport {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        param_hash: model.param_hash_hex(),
        config: model.config().clone(),
        total_bits,
        total_pixels,
        mean: RdPoint {
            bpp: total_bits as f64 / total_pixels as f64,
            psnr: per.iter().map(|e| e.psnr).sum::<f64>() / n,
            ms_ssim: per.iter().map(|e| e.ms_ssim).sum::<f64>() / n,
        },
        images: per,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Per-image table as CSV.
pub fn write_image_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.images {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Writes any serializable summary as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    write_atomic(path, &bytes)
}

/// Reads an RD curve from CSV with columns `bpp,psnr` and optionally
/// `ms_ssim`.
pub fn read_rd_csv(path: &Path) -> Result<Vec<RdPoint>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => csv_error(path, e),
        })?;
    let points = r
        .deserialize::<RdPoint>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))?;
    if points.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "no RD points".into(),
        });
    }
    Ok(points)
}

/// Writes an RD curve readable by [`read_rd_csv`].
pub fn write_rd_csv(points: &[RdPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Checkpoints (`*.hqck`) directly inside `dir`, sorted by path.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "hqck"))
        .collect();
    out.sort();
    Ok(out)
}
