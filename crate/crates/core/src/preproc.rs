//! Grayscale loading and Sauvola binarization.
//!
//! Foreground is dark ink: a pixel becomes `1` when its intensity is below the
//! local Sauvola threshold `t = m * (1 + k * (s / r - 1))`, where `m` and `s`
//! are the mean and standard deviation over a square window centered on the
//! pixel. Windows are clamped at the image border so only real pixels enter
//! the statistics.

use std::fs;
use std::path::Path;

use image::DynamicImage;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput);
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Result<Self> {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Converts a decoded image, using luma weights 0.299/0.587/0.114 for color input.
    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let (width, height) = (img.width() as usize, img.height() as usize);
        let pixels = match img {
            DynamicImage::ImageLuma8(buf) => buf.as_raw().clone(),
            img if img.color().has_color() => img
                .to_rgb8()
                .pixels()
                .map(|p| {
                    let [r, g, b] = p.0;
                    let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
                    y.round().clamp(0.0, 255.0) as u8
                })
                .collect(),
            img => img.to_luma8().into_raw(),
        };
        Self::new(width, height, pixels)
    }
}

/// Binary image; `1` marks foreground (ink).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput);
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|&&p| p > 1) {
            return Err(Error::InvalidParameter(format!("binary pixel value {bad}")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| u8::from(f(x, y)))
            .collect();
        Self::new(width, height, pixels)
    }

    /// Maps any nonzero gray value to foreground. Used for already-binarized inputs.
    pub fn from_nonzero(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            pixels: img.pixels.iter().map(|&p| u8::from(p != 0)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.pixels[y * self.width + x] = u8::from(value);
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn invert(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| 1 - p).collect(),
        }
    }

    /// Copies a `w`x`h` region starting at `(x0, y0)`; pixels outside the image are background.
    pub fn crop_padded(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let mut out = Self::zeros(w, h)?;
        for y in 0..h.min(self.height.saturating_sub(y0)) {
            let cols = w.min(self.width.saturating_sub(x0));
            let src = (y0 + y) * self.width + x0;
            out.pixels[y * w..y * w + cols].copy_from_slice(&self.pixels[src..src + cols]);
        }
        Ok(out)
    }

    /// Renders as gray: foreground black (0), background white (255).
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| if p == 1 { 0 } else { 255 }).collect(),
        }
    }

    /// Writes a raw (P4) PBM; a set bit is foreground.
    pub fn write_pbm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let row_bytes = self.width.div_ceil(8);
        for row in self.pixels.chunks(self.width) {
            let mut packed = vec![0u8; row_bytes];
            for (x, &p) in row.iter().enumerate() {
                if p == 1 {
                    packed[x / 8] |= 0x80 >> (x % 8);
                }
            }
            buf.extend_from_slice(&packed);
        }
        crate::container::write_atomic(path, &buf)?;
        Ok(())
    }

    /// Reads a plain (P1) or raw (P4) PBM.
    pub fn read_pbm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        parse_pbm(&bytes).map_err(|reason| Error::Container { path: path.to_path_buf(), reason })
    }
}

fn parse_pbm(bytes: &[u8]) -> std::result::Result<BinaryImage, String> {
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let width: usize = header[1].parse().map_err(|_| "bad width")?;
    let height: usize = header[2].parse().map_err(|_| "bad height")?;
    let mut pixels = Vec::with_capacity(width * height);
    match header[0].as_str() {
        "P4" => {
            pos += 1;
            let row_bytes = width.div_ceil(8);
            let data = bytes.get(pos..pos + row_bytes * height).ok_or("truncated raster")?;
            for row in data.chunks(row_bytes) {
                pixels.extend((0..width).map(|x| (row[x / 8] >> (7 - x % 8)) & 1));
            }
        }
        "P1" => {
            pixels.extend(
                bytes[pos..]
                    .iter()
                    .filter(|b| matches!(b, b'0' | b'1'))
                    .take(width * height)
                    .map(|b| b - b'0'),
            );
        }
        other => return Err(format!("unsupported magic `{other}`")),
    }
    BinaryImage::new(width, height, pixels).map_err(|e| e.to_string())
}

/// Loads an image as grayscale (PNG, PGM, or anything the `image` crate decodes).
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    GrayImage::from_dynamic(&image::open(path)?)
}

/// Loads an already-binary document. PBM bits map directly; for other formats any
/// nonzero pixel is foreground.
pub fn load_binary(path: &Path) -> Result<BinaryImage> {
    let is_pbm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pbm"));
    if is_pbm {
        BinaryImage::read_pbm(path)
    } else {
        Ok(BinaryImage::from_nonzero(&load_gray(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SauvolaParams {
    pub window: usize,
    pub k: f64,
    pub r: f64,
}

impl Default for SauvolaParams {
    fn default() -> Self {
        Self { window: 51, k: 0.2, r: 128.0 }
    }
}

impl SauvolaParams {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::EvenWindow(self.window));
        }
        if self.window < 3 {
            return Err(Error::InvalidParameter(format!("window {} < 3", self.window)));
        }
        if !(self.k > 0.0 && self.k < 1.0) {
            return Err(Error::InvalidParameter(format!("k = {} not in (0, 1)", self.k)));
        }
        if !(self.r > 0.0) {
            return Err(Error::InvalidParameter(format!("r = {} must be positive", self.r)));
        }
        Ok(())
    }
}

/// Summed-area tables of intensities and squared intensities, `(w+1) x (h+1)`.
struct IntegralImages {
    stride: usize,
    sum: Vec<u64>,
    sum_sq: Vec<u64>,
}

impl IntegralImages {
    fn new(img: &GrayImage) -> Self {
        let stride = img.width + 1;
        let mut sum = vec![0u64; stride * (img.height + 1)];
        let mut sum_sq = vec![0u64; stride * (img.height + 1)];
        for y in 0..img.height {
            let (mut row, mut row_sq) = (0u64, 0u64);
            for x in 0..img.width {
                let v = u64::from(img.get(x, y));
                row += v;
                row_sq += v * v;
                let i = (y + 1) * stride + x + 1;
                sum[i] = sum[i - stride] + row;
                sum_sq[i] = sum_sq[i - stride] + row_sq;
            }
        }
        Self { stride, sum, sum_sq }
    }

    /// Sums over the inclusive rectangle `[x0, x1] x [y0, y1]`.
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> (u64, u64) {
        let s = self.stride;
        let (a, b, c, d) = (y0 * s + x0, y0 * s + x1 + 1, (y1 + 1) * s + x0, (y1 + 1) * s + x1 + 1);
        (
            self.sum[d] + self.sum[a] - self.sum[b] - self.sum[c],
            self.sum_sq[d] + self.sum_sq[a] - self.sum_sq[b] - self.sum_sq[c],
        )
    }
}

/// Sauvola threshold from exact integer window statistics. The variance numerator
/// `n * sum_sq - sum^2` is an exact integer below 2^53, so it converts without rounding.
fn threshold(sum: u64, sum_sq: u64, count: u64, k: f64, r: f64) -> f64 {
    let n = count as f64;
    let mean = sum as f64 / n;
    let var = (count * sum_sq - sum * sum) as f64 / (n * n);
    mean * (1.0 + k * (var.sqrt() / r - 1.0))
}

/// Sauvola binarization with border-clamped windows, computed via integral images.
pub fn sauvola_binarize(img: &GrayImage, params: &SauvolaParams) -> Result<BinaryImage> {
    params.validate()?;
    let integral = IntegralImages::new(img);
    let half = params.window / 2;
    let (w, h) = (img.width, img.height);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(half), (y + half).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(half), (x + half).min(w - 1));
            let (sum, sum_sq) = integral.rect(x0, y0, x1, y1);
            let count = ((x1 - x0 + 1) * (y1 - y0 + 1)) as u64;
            let t = threshold(sum, sum_sq, count, params.k, params.r);
            pixels.push(u8::from(f64::from(img.get(x, y)) < t));
        }
    }
    Ok(BinaryImage { width: w, height: h, pixels })
}

/// Fraction of foreground pixels.
pub fn foreground_fraction(img: &BinaryImage) -> Result<f64> {
    if img.pixels.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(img.foreground_count() as f64 / img.pixels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(v: u8) -> GrayImage {
        GrayImage::new(20, 10, vec![v; 200]).unwrap()
    }

    #[test]
    fn uniform_white_is_background() {
        let out = sauvola_binarize(&uniform(255), &SauvolaParams::default()).unwrap();
        assert_eq!(out.foreground_count(), 0);
    }

    #[test]
    fn uniform_black_is_background() {
        let out = sauvola_binarize(&uniform(0), &SauvolaParams::default()).unwrap();
        assert_eq!(out.foreground_count(), 0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let img = uniform(10);
        let even = SauvolaParams { window: 50, ..Default::default() };
        assert!(matches!(sauvola_binarize(&img, &even), Err(Error::EvenWindow(50))));
        let bad_k = SauvolaParams { k: 1.0, ..Default::default() };
        assert!(sauvola_binarize(&img, &bad_k).is_err());
        assert!(matches!(GrayImage::new(0, 5, vec![]), Err(Error::EmptyInput)));
    }

    #[test]
    fn foreground_fraction_examples() {
        let zeros = BinaryImage::zeros(224, 224).unwrap();
        assert_eq!(foreground_fraction(&zeros).unwrap(), 0.0);
        assert_eq!(foreground_fraction(&zeros.invert()).unwrap(), 1.0);

        let mut img = zeros.clone();
        for i in 0..1254 {
            img.set(i % 224, i / 224, true);
        }
        let f = foreground_fraction(&img).unwrap();
        assert_eq!(f, 1254.0 / 50176.0);
        assert!(f < 0.025);
    }

    #[test]
    fn pbm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pbm");
        let img = BinaryImage::from_fn(13, 7, |x, y| (x * 3 + y) % 5 == 0).unwrap();
        img.write_pbm(&path).unwrap();
        assert_eq!(BinaryImage::read_pbm(&path).unwrap(), img);
        assert_eq!(load_binary(&path).unwrap(), img);
    }

    #[test]
    fn plain_pbm_parses() {
        let img = parse_pbm(b"P1\n# comment\n3 2\n1 0 1\n0 1 0\n").unwrap();
        assert_eq!(img.pixels(), &[1, 0, 1, 0, 1, 0]);
    }

    /// Direct per-pixel window loop.
    fn naive(img: &GrayImage, p: &SauvolaParams) -> BinaryImage {
        let half = p.window / 2;
        let (w, h) = (img.width(), img.height());
        BinaryImage::from_fn(w, h, |x, y| {
            let (mut sum, mut sum_sq, mut n) = (0u64, 0u64, 0u64);
            for yy in y.saturating_sub(half)..=(y + half).min(h - 1) {
                for xx in x.saturating_sub(half)..=(x + half).min(w - 1) {
                    let v = u64::from(img.get(xx, yy));
                    sum += v;
                    sum_sq += v * v;
                    n += 1;
                }
            }
            let nf = n as f64;
            let s = ((n * sum_sq - sum * sum) as f64 / (nf * nf)).sqrt();
            f64::from(img.get(x, y)) < sum as f64 / nf * (1.0 + p.k * (s / p.r - 1.0))
        })
        .unwrap()
    }

    #[test]
    fn half_split_matches_naive() {
        let img = GrayImage::from_fn(64, 64, |x, _| if x < 32 { 0 } else { 255 }).unwrap();
        let p = SauvolaParams::default();
        let out = sauvola_binarize(&img, &p).unwrap();
        assert_eq!(out, naive(&img, &p));
        for y in 0..64 {
            for x in 32..64 {
                assert_eq!(out.get(x, y), 0);
            }
            // dark pixels whose window reaches the bright half
            for x in 7..32 {
                assert_eq!(out.get(x, y), 1);
            }
            // windows entirely inside the dark half have t = 0
            for x in 0..7 {
                assert_eq!(out.get(x, y), 0);
            }
        }
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn integral_matches_naive(
            (w, h, pixels) in (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec(any::<u8>(), w * h))
            }),
            window in (1usize..8).prop_map(|v| 2 * v + 1),
            two_level in any::<bool>(),
        ) {
            let pixels = if two_level { pixels.iter().map(|&v| if v < 128 { 0 } else { 255 }).collect() } else { pixels };
            let img = GrayImage::new(w, h, pixels).unwrap();
            let p = SauvolaParams { window, ..Default::default() };
            prop_assert_eq!(sauvola_binarize(&img, &p).unwrap(), naive(&img, &p));
        }

        #[test]
        fn invert_complements_fraction(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
            let img = BinaryImage::from_fn(w, h, |x, y| (x as u64 * 31 + y as u64 * 17 + seed) % 7 < 3).unwrap();
            let f = foreground_fraction(&img).unwrap();
            let g = foreground_fraction(&img.invert()).unwrap();
            prop_assert!((f + g - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_pads_with_background() {
        let img = BinaryImage::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        let c = img.crop_padded(1, 0, 3, 3).unwrap();
        assert_eq!(c.pixels(), &[1, 0, 0, 1, 0, 0, 0, 0, 0]);
    }
}
