//! RGB image tensors: loading, saving, cropping and stride-alignment padding.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 3×H×W image with channels in R, G, B order. Values loaded from disk lie
/// in `[0, 1]`; intermediate images (e.g. after illumination correction) may
/// leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "image data must be 3×H×W");
        ImageTensor { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        ImageTensor { height, width, data }
    }

    pub fn from_rgb8(width: usize, height: usize, pixels: &[u8]) -> Self {
        assert_eq!(pixels.len(), 3 * width * height, "expected packed RGB8 pixels");
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        ImageTensor { height, width, data }
    }

    /// Packed RGB8, clamped to `[0, 1]` and rounded to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                out[3 * i + c] = quantize_8bit(self.data[c * plane + i]);
            }
        }
        out
    }

    /// Round-trips through 8-bit storage.
    pub fn quantized_8bit(&self) -> Self {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize_8bit(v) as f64 / 255.0).collect(),
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.num_pixels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamped(&self) -> Self {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// `[1, 3, H, W]` tensor view for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let ok = (s.len() == 4 && s[0] == 1 && s[1] == 3) || (s.len() == 3 && s[0] == 3);
        if !ok {
            return Err(Error::Shape(format!("expected (1,)3×H×W tensor, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok(ImageTensor::new(h, w, t.data().to_vec()))
    }

    /// Stacks images of identical size into a `[B, 3, H, W]` tensor.
    pub fn batch(images: &[ImageTensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::Shape("batch images differ in size".into()));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(&[images.len(), 3, h, w], data))
    }

    /// Top-left `h×w` sub-image.
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        self.crop_at(0, 0, h, w)
    }

    pub fn crop_at(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}×{w} at ({y0},{x0}) exceeds image {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(ImageTensor {
            height: h,
            width: w,
            data,
        })
    }
}

#[inline]
fn quantize_8bit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok(ImageTensor::from_rgb8(
        rgb.width() as usize,
        rgb.height() as usize,
        rgb.as_raw(),
    ))
}

/// Supported raster files directly inside `dir`, sorted by path.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Writes an 8-bit RGB file atomically; the format follows the file
/// extension.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = image::ImageFormat::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8())
        .expect("buffer size matches dimensions");
    let mut bytes = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut bytes, format).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    crate::files::write_atomic(path, bytes.get_ref())
}

/// Uniformly placed `size×size` crop; the offset depends only on `seed`.
pub fn random_crop(img: &ImageTensor, size: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_crop_with(img, size, &mut rng)
}

pub(crate) fn random_crop_with<R: Rng>(img: &ImageTensor, size: usize, rng: &mut R) -> Result<ImageTensor> {
    if img.height < size || img.width < size {
        return Err(Error::Dimension(format!(
            "image {}×{} is smaller than crop size {size}",
            img.height, img.width
        )));
    }
    let y0 = rng.gen_range(0..=img.height - size);
    let x0 = rng.gen_range(0..=img.width - size);
    img.crop_at(y0, x0, size, size)
}

/// Original dimensions recorded by [`pad_to_multiple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OriginalDims {
    pub height: usize,
    pub width: usize,
}

/// Mirror-pads the bottom and right edges so both dimensions become
/// multiples of `m`.
pub fn pad_to_multiple(img: &ImageTensor, m: usize) -> (ImageTensor, OriginalDims) {
    assert!(m >= 1, "padding multiple must be positive");
    let dims = OriginalDims {
        height: img.height,
        width: img.width,
    };
    let ph = img.height.div_ceil(m) * m;
    let pw = img.width.div_ceil(m) * m;
    if ph == img.height && pw == img.width {
        return (img.clone(), dims);
    }
    let mut data = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            let sy = reflect(y, img.height);
            let row = (c * img.height + sy) * img.width;
            for x in 0..pw {
                data.push(img.data[row + reflect(x, img.width)]);
            }
        }
    }
    (
        ImageTensor {
            height: ph,
            width: pw,
            data,
        },
        dims,
    )
}

/// Inverse of [`pad_to_multiple`].
pub fn unpad(img: &ImageTensor, dims: OriginalDims) -> Result<ImageTensor> {
    img.crop(dims.height, dims.width)
}

/// Mirror index without repeating the edge sample (…, 2, 1, 0, 1, 2, …).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}
