//! Synthetic signature corpora: per-writer stroke glyphs rendered with small
//! random perturbations, and stamp overlays with known ground truth.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{save_signature, Polarity, SignatureImage, Source};

/// A writer's prototype: polylines in unit coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub strokes: Vec<Vec<(f64, f64)>>,
    pub pen_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphConfig {
    pub height: usize,
    pub width: usize,
    pub strokes: usize,
    pub points_per_stroke: usize,
    /// Control-point jitter between samples of one writer, unit coordinates.
    pub jitter: f64,
    pub ink: f64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 96,
            strokes: 3,
            points_per_stroke: 6,
            jitter: 0.02,
            ink: 0.05,
        }
    }
}

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::validation("synthetic images must be at least 8x8"));
        }
        if self.strokes == 0 || self.points_per_stroke < 2 {
            return Err(Error::validation("need >= 1 stroke of >= 2 points"));
        }
        if !(0.0..=0.5).contains(&self.ink) {
            return Err(Error::validation("ink intensity must be in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Random smooth-ish polylines drifting left to right.
pub fn random_glyph<R: Rng>(cfg: &GlyphConfig, rng: &mut R) -> Glyph {
    let strokes = (0..cfg.strokes)
        .map(|s| {
            let x0 = 0.1 + 0.8 * s as f64 / cfg.strokes as f64;
            let span = 0.8 / cfg.strokes as f64 + 0.15;
            let mut y: f64 = rng.gen_range(0.25..0.75);
            (0..cfg.points_per_stroke)
                .map(|i| {
                    let x = x0 + span * i as f64 / (cfg.points_per_stroke - 1) as f64 + rng.gen_range(-0.04..0.04);
                    y = (y + rng.gen_range(-0.3..0.3)).clamp(0.12, 0.88);
                    (x.clamp(0.05, 0.95), y)
                })
                .collect()
        })
        .collect();
    Glyph {
        strokes,
        pen_width: rng.gen_range(1.0..1.8),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Anti-aliased rendering on a white background.
pub fn render_glyph(glyph: &Glyph, height: usize, width: usize, ink: f64) -> Array2<f64> {
    let scale = |(x, y): (f64, f64)| (x * width as f64, y * height as f64);
    let segs: Vec<((f64, f64), (f64, f64))> = glyph
        .strokes
        .iter()
        .flat_map(|s| s.windows(2).map(|w| (scale(w[0]), scale(w[1]))))
        .collect();
    let r = glyph.pen_width / 2.0;
    Array2::from_shape_fn((height, width), |(y, x)| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let d = segs
            .iter()
            .map(|&(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min);
        let cover = (r + 0.5 - d).clamp(0.0, 1.0);
        1.0 - (1.0 - ink) * cover
    })
}

/// One sample of a writer: the prototype with jittered control points.
pub fn sample_glyph<R: Rng>(proto: &Glyph, jitter: f64, rng: &mut R) -> Glyph {
    let n = Normal::new(0.0, jitter.max(1e-12)).expect("finite std");
    let (sx, sy) = (n.sample(rng), n.sample(rng));
    Glyph {
        strokes: proto
            .strokes
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&(x, y)| (x + sx + n.sample(rng), y + sy + n.sample(rng)))
                    .collect()
            })
            .collect(),
        pen_width: (proto.pen_width * (1.0 + n.sample(rng))).max(0.6),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampConfig {
    /// Stamp ink intensity range; lighter than signature ink.
    pub intensity: (f64, f64),
    pub ring_width: f64,
    /// Short straight strokes inside the ring, standing in for stamp text.
    pub text_marks: usize,
}

impl Default for StampConfig {
    fn default() -> Self {
        Self {
            intensity: (0.45, 0.7),
            ring_width: 2.0,
            text_marks: 4,
        }
    }
}

/// Ellipse ring plus text-like bars. Returns per-pixel stamp intensity, with
/// 1.0 where the stamp leaves no mark.
pub fn stamp_layer<R: Rng>(height: usize, width: usize, cfg: &StampConfig, rng: &mut R) -> Array2<f64> {
    let level = rng.gen_range(cfg.intensity.0..=cfg.intensity.1);
    let cx = rng.gen_range(0.3..0.7) * width as f64;
    let cy = rng.gen_range(0.3..0.7) * height as f64;
    let ry = rng.gen_range(0.3..0.45) * height as f64;
    let rx = ry * rng.gen_range(1.0..1.8);
    let marks: Vec<((f64, f64), (f64, f64))> = (0..cfg.text_marks)
        .map(|_| {
            let y = cy + rng.gen_range(-0.5..0.5) * ry;
            let x = cx + rng.gen_range(-0.6..0.3) * rx;
            ((x, y), (x + rng.gen_range(0.15..0.4) * rx, y))
        })
        .collect();
    let half = cfg.ring_width / 2.0;
    Array2::from_shape_fn((height, width), |(y, x)| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let (u, v) = ((p.0 - cx) / rx, (p.1 - cy) / ry);
        let r = (u * u + v * v).sqrt();
        // radial distance to the ellipse, approximately in pixels
        let ring = ((r - 1.0).abs() * rx.min(ry) - half).max(0.0);
        let text = marks
            .iter()
            .map(|&(a, b)| (segment_distance(p, a, b) - 0.5).max(0.0))
            .fold(f64::INFINITY, f64::min);
        let cover = (1.0 - ring.min(text)).clamp(0.0, 1.0);
        1.0 - (1.0 - level) * cover
    })
}

/// Darker ink wins, as with ink layered on paper.
pub fn overlay(clean: &Array2<f64>, stamp: &Array2<f64>) -> Array2<f64> {
    ndarray::Zip::from(clean).and(stamp).map_collect(|&a, &b| a.min(b))
}

pub fn psnr(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let mse = (a - b).mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// A clean image and its stamped counterpart.
#[derive(Debug, Clone)]
pub struct StampedPair {
    pub clean: SignatureImage,
    pub stamped: SignatureImage,
}

/// `n` unrelated clean glyphs, each paired with a stamped copy.
pub fn stamp_corpus(n: usize, glyph: &GlyphConfig, stamp: &StampConfig, seed: u64) -> Result<Vec<StampedPair>> {
    glyph.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let g = random_glyph(glyph, &mut rng);
            let clean_px = render_glyph(&g, glyph.height, glyph.width, glyph.ink);
            let layer = stamp_layer(glyph.height, glyph.width, stamp, &mut rng);
            let user = format!("g{i:04}");
            Ok(StampedPair {
                stamped: SignatureImage::new(overlay(&clean_px, &layer), Polarity::Original)?
                    .with_user(user.clone())
                    .with_source(Source::TargetStamped),
                clean: SignatureImage::new(clean_px, Polarity::Original)?
                    .with_user(user)
                    .with_source(Source::TargetUnstamped),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterCorpusConfig {
    pub writers: usize,
    pub references_per_writer: usize,
    pub targets_per_writer: usize,
    pub glyph: GlyphConfig,
    pub stamp: StampConfig,
    pub seed: u64,
}

impl Default for WriterCorpusConfig {
    fn default() -> Self {
        Self {
            writers: 20,
            references_per_writer: 6,
            targets_per_writer: 2,
            glyph: GlyphConfig::default(),
            stamp: StampConfig::default(),
            seed: 0,
        }
    }
}

/// Writes `root/<writer>/{reference,target_unstamped,target_stamped}/*.png`.
/// Each target is rendered once and saved both plain and stamped, so the
/// stamped files have exact clean ground truth.
pub fn write_writer_corpus(root: &Path, cfg: &WriterCorpusConfig) -> Result<usize> {
    cfg.glyph.validate()?;
    if cfg.writers < 2 {
        return Err(Error::validation("need >= 2 writers"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.glyph.height, cfg.glyph.width);
    let mut written = 0;
    for wi in 0..cfg.writers {
        let user = format!("w{wi:03}");
        let proto = random_glyph(&cfg.glyph, &mut rng);
        let render = |rng: &mut ChaCha8Rng| {
            render_glyph(&sample_glyph(&proto, cfg.glyph.jitter, rng), h, w, cfg.glyph.ink)
        };
        for k in 0..cfg.references_per_writer {
            let img = SignatureImage::new(render(&mut rng), Polarity::Original)?
                .with_user(&user)
                .with_source(Source::Reference);
            save_signature(&img, &root.join(&user).join("reference").join(format!("r{k:02}.png")))?;
            written += 1;
        }
        for k in 0..cfg.targets_per_writer {
            let clean = render(&mut rng);
            let stamped = overlay(&clean, &stamp_layer(h, w, &cfg.stamp, &mut rng));
            for (px, source) in [(clean, Source::TargetUnstamped), (stamped, Source::TargetStamped)] {
                let img = SignatureImage::new(px, Polarity::Original)?
                    .with_user(&user)
                    .with_source(source);
                save_signature(&img, &root.join(&user).join(source.as_str()).join(format!("t{k:02}.png")))?;
                written += 1;
            }
        }
    }
    Ok(written)
}
