//! Signature crops: loading, polarity, binarization, model-input tensors and
//! augmentation.
//!
//! Pixel intensities live on a dyadic grid of step 2^-24 inside [0, 1]. Every
//! value on that grid has an exactly representable complement, so `invert` is
//! a bit-exact involution.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const QUANT_STEPS: f64 = (1u64 << 24) as f64;

/// BT.601 luma weights.
pub const LUMA_BT601: [f64; 3] = [0.299, 0.587, 0.114];

#[inline]
fn quantize(p: f64) -> f64 {
    let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
    (p * QUANT_STEPS).round() / QUANT_STEPS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Dark ink on a white background.
    #[default]
    Original,
    /// Light ink on a black background.
    Inverse,
}

impl Polarity {
    pub fn background(self) -> f64 {
        match self {
            Polarity::Original => 1.0,
            Polarity::Inverse => 0.0,
        }
    }

    pub fn toggled(self) -> Self {
        match self {
            Polarity::Original => Polarity::Inverse,
            Polarity::Inverse => Polarity::Original,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Reference,
    TargetUnstamped,
    TargetStamped,
    #[default]
    Unknown,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Reference => "reference",
            Source::TargetUnstamped => "target_unstamped",
            Source::TargetStamped => "target_stamped",
            Source::Unknown => "unknown",
        }
    }

    pub fn all() -> [Source; 4] {
        [
            Source::Reference,
            Source::TargetUnstamped,
            Source::TargetStamped,
            Source::Unknown,
        ]
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::all()
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| Error::validation(format!("unknown signature source '{s}'")))
    }
}

/// A single-channel signature crop plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureImage {
    pixels: Array2<f64>,
    pub polarity: Polarity,
    pub user_id: String,
    pub source: Source,
    pub cleaned: bool,
    /// Transform chain applied by augmentation, oldest first.
    pub transforms: Vec<String>,
}

impl SignatureImage {
    /// Builds an image, clamping and quantizing intensities.
    pub fn new(pixels: Array2<f64>, polarity: Polarity) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::validation(format!("zero-area image ({h}x{w})")));
        }
        Ok(Self {
            pixels: pixels.mapv(quantize),
            polarity,
            user_id: String::new(),
            source: Source::Unknown,
            cleaned: false,
            transforms: Vec::new(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, polarity: Polarity) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value), polarity)
    }

    pub fn with_user(mut self, user_id: impl Into<String>) -> Self {
        self.user_id = user_id.into();
        self
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn background(&self) -> f64 {
        self.polarity.background()
    }

    /// Same metadata, new pixels.
    pub fn with_pixels(&self, pixels: Array2<f64>) -> Result<Self> {
        let mut out = Self::new(pixels, self.polarity)?;
        out.user_id = self.user_id.clone();
        out.source = self.source;
        out.cleaned = self.cleaned;
        out.transforms = self.transforms.clone();
        Ok(out)
    }

    /// True where the pixel is closer to ink than to background.
    pub fn ink_mask(&self, threshold: f64) -> Array2<bool> {
        match self.polarity {
            Polarity::Original => self.pixels.mapv(|p| p < threshold),
            Polarity::Inverse => self.pixels.mapv(|p| p > threshold),
        }
    }
}

/// Per-image sidecar stored next to the raster as `<file>.meta.json`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ImageMeta {
    #[serde(default)]
    pub user_id: String,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub polarity: Option<Polarity>,
    #[serde(default)]
    pub cleaned: bool,
    #[serde(default)]
    pub transforms: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Decodes a raster, converts to BT.601 luma in [0, 1] and attaches sidecar
/// metadata when present. Transparent pixels are composited onto white.
pub fn load_signature(path: &Path, polarity_hint: Polarity) -> Result<SignatureImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgba = decoded.to_rgba32f();
    let (w, h) = rgba.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::validation(format!(
            "zero-area image {}",
            path.display()
        )));
    }
    let mut pixels = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in rgba.enumerate_pixels() {
        let [r, g, b, a] = px.0.map(f64::from);
        let luma = LUMA_BT601[0] * r + LUMA_BT601[1] * g + LUMA_BT601[2] * b;
        pixels[[y as usize, x as usize]] = luma * a + (1.0 - a);
    }

    let mut img = SignatureImage::new(pixels, polarity_hint)?;
    let meta_path = sidecar_path(path);
    if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ImageMeta = serde_json::from_str(&text)?;
        img.user_id = meta.user_id;
        img.source = meta.source;
        img.cleaned = meta.cleaned;
        img.transforms = meta.transforms;
        if let Some(p) = meta.polarity {
            img.polarity = p;
        }
    }
    Ok(img)
}

/// Writes a 16-bit grayscale PNG plus its sidecar.
pub fn save_signature(img: &SignatureImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w) = img.pixels.dim();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(img.pixels[[y as usize, x as usize]] * 65535.0).round() as u16])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let meta = ImageMeta {
        user_id: img.user_id.clone(),
        source: img.source,
        polarity: Some(img.polarity),
        cleaned: img.cleaned,
        transforms: img.transforms.clone(),
    };
    let meta_path = sidecar_path(path);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))
}

pub fn invert(img: &SignatureImage) -> SignatureImage {
    let mut out = img.clone();
    out.pixels.mapv_inplace(|p| 1.0 - p);
    out.polarity = img.polarity.toggled();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizeMethod {
    Otsu,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct Binarized {
    pub image: SignatureImage,
    pub threshold: f64,
    /// Set when Otsu found no split (constant image).
    pub fallback: bool,
}

/// Thresholds intensities: `p >= t` becomes 1, else 0. Ink therefore stays
/// dark under original polarity and light under inverse polarity.
pub fn binarize(img: &SignatureImage, method: BinarizeMethod) -> Binarized {
    let (threshold, fallback) = match method {
        BinarizeMethod::Fixed(t) => (t, false),
        BinarizeMethod::Otsu => match otsu_threshold(img.pixels()) {
            Some(t) => (t, false),
            None => (0.5, true),
        },
    };
    let pixels = if fallback {
        // Nothing separates ink from paper: everything is background.
        Array2::from_elem(img.pixels.dim(), img.background())
    } else {
        img.pixels.mapv(|p| if p >= threshold { 1.0 } else { 0.0 })
    };
    Binarized {
        image: img.with_pixels(pixels).expect("same dims"),
        threshold,
        fallback,
    }
}

/// Otsu's threshold over a 256-bin histogram. Returns the upper edge of the
/// best lower class, or `None` when every pixel falls in a single bin.
pub fn otsu_threshold(pixels: &Array2<f64>) -> Option<f64> {
    let mut hist = [0u64; 256];
    for &p in pixels {
        hist[((p * 256.0) as usize).min(255)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = pixels.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &count) in hist.iter().enumerate().take(255) {
        w0 += count as f64;
        sum0 += k as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best.0 {
            best = (between, k);
        }
    }
    Some((best.1 + 1) as f64 / 256.0)
}

/// 1-D resampling weights: area averaging when shrinking, linear
/// interpolation (edge-clamped) when enlarging.
fn resample_weights(src: usize, dst: usize) -> Array2<f64> {
    let mut w = Array2::zeros((dst, src));
    if src == dst {
        for i in 0..dst {
            w[[i, i]] = 1.0;
        }
        return w;
    }
    let scale = src as f64 / dst as f64;
    if scale > 1.0 {
        for i in 0..dst {
            let lo = i as f64 * scale;
            let hi = lo + scale;
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                w[[i, j]] += overlap / scale;
                j += 1;
            }
        }
    } else {
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let j0 = pos.floor() as usize;
            let j1 = (j0 + 1).min(src - 1);
            let frac = pos - j0 as f64;
            w[[i, j0]] += 1.0 - frac;
            w[[i, j1]] += frac;
        }
    }
    w
}

/// Resamples a plane to `height x width`.
pub fn resample(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (height, width) {
        return src.clone();
    }
    let wy = resample_weights(h, height);
    let wx = resample_weights(w, width);
    wy.dot(src).dot(&wx.t())
}

/// Where resized content sits inside a padded canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Letterbox {
    pub top: usize,
    pub left: usize,
    pub content_height: usize,
    pub content_width: usize,
    pub source_height: usize,
    pub source_width: usize,
}

/// Aspect-preserving resize into `height x width`, centred, padded with the
/// polarity's background intensity.
pub fn letterbox(img: &SignatureImage, height: usize, width: usize) -> (Array2<f64>, Letterbox) {
    let (h, w) = img.pixels.dim();
    let scale = (height as f64 / h as f64).min(width as f64 / w as f64);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, height);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, width);
    let content = resample(&img.pixels, ch, cw);
    let top = (height - ch) / 2;
    let left = (width - cw) / 2;
    let mut canvas = Array2::from_elem((height, width), img.background());
    canvas
        .slice_mut(ndarray::s![top..top + ch, left..left + cw])
        .assign(&content);
    let lb = Letterbox {
        top,
        left,
        content_height: ch,
        content_width: cw,
        source_height: h,
        source_width: w,
    };
    (canvas, lb)
}

/// Crops the content region back out and resizes to the source dimensions.
pub fn unletterbox(canvas: &Array2<f64>, lb: &Letterbox) -> Array2<f64> {
    let content = canvas.slice(ndarray::s![
        lb.top..lb.top + lb.content_height,
        lb.left..lb.left + lb.content_width
    ]);
    resample(&content.to_owned(), lb.source_height, lb.source_width)
}

/// Model input geometry and standardization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputSpec {
    /// Single channel, [0,1] mapped onto [-1,1].
    pub fn grayscale(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 1,
            mean: vec![0.5],
            std: vec![0.5],
        }
    }

    /// Three replicated channels with ImageNet statistics.
    pub fn imagenet(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 3,
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::validation("input dims must be >= 1"));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(Error::validation(
                "mean/std length must equal channel count",
            ));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::validation("std must be positive"));
        }
        Ok(())
    }
}

/// Produces a `(channels, height, width)` standardized tensor.
pub fn resize_normalize(img: &SignatureImage, spec: &InputSpec) -> Array3<f64> {
    let (plane, _) = letterbox(img, spec.height, spec.width);
    let mut out = Array3::zeros((spec.channels, spec.height, spec.width));
    for c in 0..spec.channels {
        let (m, s) = (spec.mean[c], spec.std[c]);
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&plane.mapv(|p| (p - m) / s));
    }
    out
}

fn sample_bilinear(src: &Array2<f64>, y: f64, x: f64, fill: f64) -> f64 {
    let (h, w) = src.dim();
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return fill;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            fill
        } else {
            src[[yy as usize, xx as usize]]
        }
    };
    let mut v = at(y0, x0) * (1.0 - fy) * (1.0 - fx);
    if fx > 0.0 {
        v += at(y0, x0 + 1.0) * (1.0 - fy) * fx;
    }
    if fy > 0.0 {
        v += at(y0 + 1.0, x0) * fy * (1.0 - fx);
        if fx > 0.0 {
            v += at(y0 + 1.0, x0 + 1.0) * fy * fx;
        }
    }
    v
}

/// Rotates about the image centre; uncovered area is background.
pub fn rotate(img: &SignatureImage, degrees: f64) -> SignatureImage {
    let mut out = if degrees == 0.0 {
        img.clone()
    } else {
        let (h, w) = img.pixels.dim();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = degrees.to_radians().sin_cos();
        let bg = img.background();
        let pixels = Array2::from_shape_fn((h, w), |(y, x)| {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            sample_bilinear(&img.pixels, sy, sx, bg)
        });
        img.with_pixels(pixels).expect("same dims")
    };
    out.transforms.push(format!("rotate({degrees:.3})"));
    out
}

/// Grows ink by a `kernel x kernel` square structuring element.
pub fn thicken(img: &SignatureImage, kernel: usize) -> SignatureImage {
    let (h, w) = img.pixels.dim();
    let r = (kernel.max(1) - 1) / 2;
    let ink_is_dark = img.polarity == Polarity::Original;
    let pixels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = img.pixels[[y, x]];
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                let p = img.pixels[[yy, xx]];
                acc = if ink_is_dark { acc.min(p) } else { acc.max(p) };
            }
        }
        acc
    });
    let mut out = img.with_pixels(pixels).expect("same dims");
    out.transforms.push(format!("thicken({kernel})"));
    out
}

/// Random smooth warp: displacements drawn on a `grid x grid` lattice and
/// bilinearly interpolated. `magnitude` is in pixels at a 224-pixel scale.
pub fn distort<R: Rng>(img: &SignatureImage, grid: usize, magnitude: f64, rng: &mut R) -> SignatureImage {
    let (h, w) = img.pixels.dim();
    let g = grid.max(2);
    let m = magnitude * h.max(w) as f64 / 224.0;
    let mut out = if m == 0.0 {
        img.clone()
    } else {
        let dy = Array2::from_shape_fn((g, g), |_| rng.gen_range(-m..=m));
        let dx = Array2::from_shape_fn((g, g), |_| rng.gen_range(-m..=m));
        let field = |f: &Array2<f64>, y: usize, x: usize| -> f64 {
            let gy = if h > 1 { y as f64 / (h - 1) as f64 * (g - 1) as f64 } else { 0.0 };
            let gx = if w > 1 { x as f64 / (w - 1) as f64 * (g - 1) as f64 } else { 0.0 };
            sample_bilinear(f, gy, gx, 0.0)
        };
        let bg = img.background();
        let pixels = Array2::from_shape_fn((h, w), |(y, x)| {
            let sy = y as f64 + field(&dy, y, x);
            let sx = x as f64 + field(&dx, y, x);
            sample_bilinear(&img.pixels, sy, sx, bg)
        });
        img.with_pixels(pixels).expect("same dims")
    };
    out.transforms
        .push(format!("distort(grid={grid},magnitude={magnitude:.3})"));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Symmetric closed interval `[-r, r]` in degrees.
    pub rotation_range_deg: (f64, f64),
    pub thicken_kernel_px: usize,
    pub distortion_grid: usize,
    pub distortion_magnitude: f64,
    pub target_count_per_user: usize,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_range_deg: (-10.0, 10.0),
            thicken_kernel_px: 3,
            distortion_grid: 4,
            distortion_magnitude: 8.0,
            target_count_per_user: 80,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rotation_range_deg;
        if lo > hi || (lo + hi).abs() > 1e-12 {
            return Err(Error::validation(format!(
                "rotation range [{lo}, {hi}] must be symmetric about 0"
            )));
        }
        if self.target_count_per_user == 0 {
            return Err(Error::validation("target_count_per_user must be >= 1"));
        }
        if self.thicken_kernel_px == 0 || self.distortion_grid == 0 {
            return Err(Error::validation("kernel and grid sizes must be positive"));
        }
        if self.distortion_magnitude < 0.0 {
            return Err(Error::validation("distortion magnitude must be >= 0"));
        }
        Ok(())
    }
}

/// Returns all originals followed by augmented copies until the target count
/// is met. Each copy applies one to three transforms drawn uniformly from
/// rotation, thickening and distortion.
pub fn augment_user(images: &[SignatureImage], cfg: &AugmentationConfig) -> Result<Vec<SignatureImage>> {
    if images.is_empty() {
        return Err(Error::validation("augment_user needs at least one image"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out: Vec<SignatureImage> = images.to_vec();
    let mut k = 0usize;
    while out.len() < cfg.target_count_per_user {
        let mut img = images[k % images.len()].clone();
        let steps = rng.gen_range(1..=3);
        for _ in 0..steps {
            img = match rng.gen_range(0..3) {
                0 => {
                    let r = cfg.rotation_range_deg.1;
                    let deg = if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
                    rotate(&img, deg)
                }
                1 => thicken(&img, cfg.thicken_kernel_px),
                _ => distort(&img, cfg.distortion_grid, cfg.distortion_magnitude, &mut rng),
            };
        }
        out.push(img);
        k += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn img(p: Array2<f64>) -> SignatureImage {
        SignatureImage::new(p, Polarity::Original).unwrap()
    }

    #[test]
    fn zero_area_rejected() {
        assert!(SignatureImage::new(Array2::zeros((0, 3)), Polarity::Original).is_err());
    }

    #[test]
    fn invert_examples() {
        let white = SignatureImage::filled(4, 5, 1.0, Polarity::Original).unwrap();
        let black = invert(&white);
        assert!(black.pixels().iter().all(|&p| p == 0.0));
        assert_eq!(black.polarity, Polarity::Inverse);

        let g = img(array![[0.3]]);
        assert!((invert(&g).pixels()[[0, 0]] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn invert_is_exact_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Array2::from_shape_fn((17, 23), |_| rng.gen::<f64>());
        let a = img(p).with_user("u1").with_source(Source::TargetStamped);
        let b = invert(&invert(&a));
        assert_eq!(a, b);
    }

    #[test]
    fn binarize_fixed() {
        let b = binarize(&img(array![[0.2, 0.8]]), BinarizeMethod::Fixed(0.5));
        assert_eq!(b.image.pixels(), &array![[0.0, 1.0]]);
        assert!(!b.fallback);
    }

    #[test]
    fn binarize_constant_falls_back() {
        let c = SignatureImage::filled(5, 5, 0.4, Polarity::Original).unwrap();
        let b = binarize(&c, BinarizeMethod::Otsu);
        assert!(b.fallback);
        assert!(b.image.pixels().iter().all(|&p| p == 1.0));
        let bi = binarize(&invert(&c), BinarizeMethod::Otsu);
        assert!(bi.image.pixels().iter().all(|&p| p == 0.0));
    }

    /// Exhaustive between-class variance over all 255 candidate cuts.
    fn brute_otsu(p: &Array2<f64>) -> f64 {
        let bins: Vec<usize> = p.iter().map(|&v| ((v * 256.0) as usize).min(255)).collect();
        let mut best = (f64::NEG_INFINITY, 0);
        for cut in 1..256 {
            let (lo, hi): (Vec<f64>, Vec<f64>) = {
                let lo: Vec<f64> = bins.iter().filter(|&&b| b < cut).map(|&b| b as f64).collect();
                let hi: Vec<f64> = bins.iter().filter(|&&b| b >= cut).map(|&b| b as f64).collect();
                (lo, hi)
            };
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
            let v = lo.len() as f64 * hi.len() as f64 * (m0 - m1).powi(2);
            if v > best.0 {
                best = (v, cut);
            }
        }
        best.1 as f64 / 256.0
    }

    #[test]
    fn otsu_bimodal_matches_brute_force() {
        let p = Array2::from_shape_fn((8, 8), |(y, _)| if y < 4 { 0.1 } else { 0.9 });
        let t = otsu_threshold(&p).unwrap();
        assert!(t > 0.1 && t < 0.9, "t = {t}");
        assert_eq!(t, brute_otsu(&p));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = Array2::from_shape_fn((9, 11), |_| rng.gen::<f64>());
            assert_eq!(otsu_threshold(&q).unwrap(), brute_otsu(&q));
        }
    }

    #[test]
    fn luma_weights() {
        let l = LUMA_BT601[0] * 1.0 + LUMA_BT601[1] * 0.0 + LUMA_BT601[2] * 0.0;
        assert!((quantize(l) - 0.299).abs() < 1e-6);
    }

    #[test]
    fn letterbox_wide_image() {
        let im = SignatureImage::filled(100, 200, 0.0, Polarity::Original).unwrap();
        let (canvas, lb) = letterbox(&im, 224, 224);
        assert_eq!((lb.content_height, lb.content_width), (112, 224));
        assert_eq!(canvas.dim(), (224, 224));
        let ink = canvas.iter().filter(|&&p| p == 0.0).count();
        assert_eq!(ink, 112 * 224);
        assert_eq!(canvas[[0, 0]], 1.0);
    }

    #[test]
    fn inverse_pads_black() {
        let im = SignatureImage::filled(10, 20, 1.0, Polarity::Inverse).unwrap();
        let (canvas, _) = letterbox(&im, 20, 20);
        assert_eq!(canvas[[0, 0]], 0.0);
    }

    #[test]
    fn resize_normalize_identity_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let im = img(Array2::from_shape_fn((6, 9), |_| rng.gen::<f64>()));
        let spec = InputSpec {
            height: 6,
            width: 9,
            channels: 1,
            mean: vec![0.0],
            std: vec![1.0],
        };
        let t = resize_normalize(&im, &spec);
        assert_eq!(t.index_axis(ndarray::Axis(0), 0), im.pixels().view());

        let dot = img(array![[0.25]]);
        let t = resize_normalize(&dot, &InputSpec { height: 224, width: 224, ..spec.clone() });
        assert!(t.iter().all(|&v| v == 0.25));

        let rgb = resize_normalize(&dot, &InputSpec::imagenet(32, 32));
        assert_eq!(rgb.dim(), (3, 32, 32));
    }

    #[test]
    fn unletterbox_restores_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let im = img(Array2::from_shape_fn((37, 81), |_| rng.gen::<f64>()));
        let (canvas, lb) = letterbox(&im, 64, 64);
        assert_eq!(unletterbox(&canvas, &lb).dim(), (37, 81));
    }

    #[test]
    fn zero_rotation_and_zero_distortion_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let im = img(Array2::from_shape_fn((12, 15), |_| rng.gen::<f64>()));
        assert_eq!(rotate(&im, 0.0).pixels(), im.pixels());
        assert_eq!(distort(&im, 4, 0.0, &mut rng).pixels(), im.pixels());
    }

    fn stroke_image() -> SignatureImage {
        let mut p = Array2::from_elem((20, 30), 1.0);
        for x in 5..25 {
            p[[10, x]] = 0.0;
        }
        for y in 4..16 {
            p[[y, 12]] = 0.0;
        }
        img(p)
    }

    /// Set dilation over a binary mask with a square element, computed
    /// directly from the definition.
    fn brute_dilate(mask: &Array2<bool>, k: usize) -> Array2<bool> {
        let (h, w) = mask.dim();
        let r = (k - 1) as isize / 2;
        Array2::from_shape_fn((h, w), |(y, x)| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask[[yy as usize, xx as usize]]
                })
            })
        })
    }

    #[test]
    fn thicken_matches_set_dilation() {
        let im = binarize(&stroke_image(), BinarizeMethod::Fixed(0.5)).image;
        let before = im.ink_mask(0.5);
        let after = thicken(&im, 3).ink_mask(0.5);
        assert_eq!(after, brute_dilate(&before, 3));
        let n0 = before.iter().filter(|&&b| b).count();
        let n1 = after.iter().filter(|&&b| b).count();
        assert!(n1 > n0);
        assert!(before.iter().zip(after.iter()).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn augment_counts_and_determinism() {
        let originals: Vec<_> = (0..12)
            .map(|i| rotate(&stroke_image(), i as f64).with_user("u"))
            .collect();
        let cfg = AugmentationConfig {
            seed: 42,
            ..Default::default()
        };
        let out = augment_user(&originals, &cfg).unwrap();
        assert!(out.len() >= 80);
        assert_eq!(&out[..12], &originals[..]);
        let augmented = &out[12..];
        assert!(augmented.len() >= 68);
        assert!(augmented
            .iter()
            .all(|a| a.transforms.len() > originals[0].transforms.len()));
        assert_eq!(out, augment_user(&originals, &cfg).unwrap());
    }

    #[test]
    fn augment_rejects_empty() {
        assert!(augment_user(&[], &AugmentationConfig::default()).is_err());
    }

    #[test]
    fn asymmetric_rotation_range_rejected() {
        let cfg = AugmentationConfig {
            rotation_range_deg: (-5.0, 10.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_luma_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let buf = image::RgbImage::from_fn(3, 1, |x, _| match x {
            0 => image::Rgb([255, 255, 255]),
            1 => image::Rgb([0, 0, 0]),
            _ => image::Rgb([255, 0, 0]),
        });
        buf.save(&path).unwrap();
        let im = load_signature(&path, Polarity::Original).unwrap();
        assert_eq!(im.pixels()[[0, 0]], 1.0);
        assert_eq!(im.pixels()[[0, 1]], 0.0);
        assert!((im.pixels()[[0, 2]] - 0.299).abs() < 1e-6);

        let tagged = im.clone().with_user("alice").with_source(Source::Reference);
        let out = dir.path().join("saved.png");
        save_signature(&tagged, &out).unwrap();
        let back = load_signature(&out, Polarity::Inverse).unwrap();
        assert_eq!(back.user_id, "alice");
        assert_eq!(back.source, Source::Reference);
        assert_eq!(back.polarity, Polarity::Original);
    }

    #[test]
    fn load_missing_file_is_io_error() {
        let err = load_signature(Path::new("/nonexistent/x.png"), Polarity::Original).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
