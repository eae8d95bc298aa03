//! Synthetic handwriting-like corpora for smoke tests and benchmarks.
//!
//! Each writer owns a random stroke texture (curved strokes with a writer-specific
//! slant, thickness and density). A writer's pages are copies of that texture with a
//! fraction of pixels flipped independently per page.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::preproc::BinaryImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrokeStyle {
    /// Strokes per 10,000 pixels.
    pub density: f64,
    pub thickness: usize,
    /// Horizontal shear per vertical pixel.
    pub slant: f64,
    /// Typical stroke extent in pixels.
    pub stroke_len: f64,
}

impl StrokeStyle {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            density: rng.random_range(8.0..16.0),
            thickness: rng.random_range(2..=3),
            slant: rng.random_range(-0.5..0.5),
            stroke_len: rng.random_range(12.0..40.0),
        }
    }
}

fn stamp(img: &mut BinaryImage, x: f64, y: f64, radius: usize) {
    let r = radius as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (px, py) = (cx + dx, cy + dy);
            if px >= 0 && py >= 0 && (px as usize) < img.width() && (py as usize) < img.height() {
                img.set(px as usize, py as usize, true);
            }
        }
    }
}

/// Random slanted quadratic-Bezier strokes.
pub fn stroke_texture(width: usize, height: usize, style: &StrokeStyle, seed: u64) -> Result<BinaryImage> {
    let mut img = BinaryImage::zeros(width, height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strokes = ((width * height) as f64 * style.density / 10_000.0).round() as usize;
    let radius = style.thickness.saturating_sub(1);
    for _ in 0..strokes {
        let x0 = rng.random_range(0.0..width as f64);
        let y0 = rng.random_range(0.0..height as f64);
        let len = style.stroke_len * rng.random_range(0.5..1.5);
        let dy = rng.random_range(-1.0..1.0) * len;
        let dx = rng.random_range(-0.6..0.6) * len + style.slant * dy;
        let (cx, cy) = (
            x0 + dx / 2.0 + rng.random_range(-0.5..0.5) * len,
            y0 + dy / 2.0 + rng.random_range(-0.5..0.5) * len,
        );
        let steps = (2.0 * len).ceil() as usize + 1;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let u = 1.0 - t;
            let x = u * u * x0 + 2.0 * u * t * cx + t * t * (x0 + dx);
            let y = u * u * y0 + 2.0 * u * t * cy + t * t * (y0 + dy);
            stamp(&mut img, x, y, radius);
        }
    }
    Ok(img)
}

/// Flips `round(fraction * pixels)` distinct pixels.
pub fn flip_noise(img: &BinaryImage, fraction: f64, seed: u64) -> BinaryImage {
    let mut out = img.clone();
    let total = img.width() * img.height();
    let flips = ((fraction * total as f64).round() as usize).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, total, flips) {
        let (x, y) = (i % img.width(), i / img.width());
        out.set(x, y, img.get(x, y) == 0);
    }
    out
}

#[derive(Debug, Clone)]
pub struct SyntheticPage {
    pub doc_id: String,
    pub writer_id: String,
    pub image: BinaryImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub writers: usize,
    pub pages_per_writer: usize,
    pub width: usize,
    pub height: usize,
    pub flip_fraction: f64,
    pub seed: u64,
}

/// Pages named `w{writer}-p{page}` with writer ids `w{writer}`; `prefix` keeps ids
/// unique across corpora generated with different seeds.
pub fn generate(spec: &SyntheticSpec, prefix: &str) -> Result<Vec<SyntheticPage>> {
    let mut pages = Vec::with_capacity(spec.writers * spec.pages_per_writer);
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    for w in 0..spec.writers {
        let style = StrokeStyle::random(&mut master);
        let texture = stroke_texture(spec.width, spec.height, &style, master.random())?;
        let writer_id = format!("{prefix}w{w:03}");
        for p in 0..spec.pages_per_writer {
            pages.push(SyntheticPage {
                doc_id: format!("{writer_id}-p{p}"),
                writer_id: writer_id.clone(),
                image: flip_noise(&texture, spec.flip_fraction, master.random()),
            });
        }
    }
    Ok(pages)
}
